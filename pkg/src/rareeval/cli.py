"""Command-line tool: synth, fit, ce, eval and calibrate.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from rareeval import __version__
from rareeval.cross_entropy import CEConfig, CEError
from rareeval.distributions import EmpiricalDistribution, encode_float
from rareeval.fitting import EMConfig, FitConfig, FitError, fit_piecewise_report
from rareeval.montecarlo import (
    EstimationError,
    StoppingRule,
    estimate_crude,
    estimate_is,
    required_samples_crude,
    write_trace_csv,
)
from rareeval.scenario import (
    SEGMENTS,
    AVControllerConfig,
    LaneChangeModel,
    ScenarioError,
    ScenarioProposal,
    crash_indicator,
    make_synthetic_ground_truth,
    read_events_csv,
    relaxed_indicator,
    segment_of,
    train_scenario_proposal,
    write_events_csv,
)
from rareeval.tilting import SupportMismatchError

log = logging.getLogger("rareeval")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
PATH_KEYS = ("config", "out", "events", "model", "proposal")

CONTROLLER = {"reaction_delay": 0.3, "trigger_ttc": 4.0, "max_decel": 8.0, "dt": 0.01, "horizon": 10.0}
DEFAULTS = {
    "synth": {"seed": 0, "n": 100_000},
    "fit": {"seed": 0, "range_lower": 0.02, "range_knots": "0.05,0.1", "ttc_knots": "0.4", "em_components": 2},
    "ce": {
        "seed": 0,
        "kind": "both",
        "ce_n": 1000,
        "ce_max_iter": 30,
        "pi_floor": 0.01,
        "min_hits": 10,
        "max_samples": 8000,
        "rho": 0.1,
        **CONTROLLER,
    },
    "eval": {
        "seed": 0,
        "alpha": 0.2,
        "beta": 0.2,
        "min_samples": 100,
        "max_samples": 1_000_000,
        "batch_size": 100,
        "workers": None,
        "crude_ttc": None,
        **CONTROLLER,
    },
    "calibrate": {"seed": 0, "n": 100_000_000, "batch_size": 1_000_000, "workers": None, **CONTROLLER},
}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration --------------------------------------------------------------


def _add_controller(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("controller")
    g.add_argument("--reaction-delay", type=float, help="seconds between trigger and braking")
    g.add_argument("--trigger-ttc", type=float, help="braking trigger TTC threshold [s]")
    g.add_argument("--max-decel", type=float, help="braking deceleration [m/s^2]")
    g.add_argument("--dt", type=float, help="simulation timestep [s]")
    g.add_argument("--horizon", type=float, help="simulation horizon [s]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rareeval", description="Accelerated evaluation of rare crash events.")
    parser.add_argument("--version", action="version", version=f"rareeval {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON file with option values; flags override it")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="master seed")

    p = sub.add_parser("synth", help="write synthetic events and the true model")
    common(p)
    p.add_argument("--n", type=int, help="number of events")

    p = sub.add_parser("fit", help="fit the lane-change model to an events CSV")
    common(p)
    p.add_argument("--events", help="events CSV")
    p.add_argument("--range-lower", type=float, help="lower bound of 1/R [1/m]")
    p.add_argument("--range-knots", help="comma-separated interior knots for 1/R")
    p.add_argument("--ttc-knots", help="comma-separated interior knots for 1/TTC; the last piece is the exponential tail")
    p.add_argument("--em-components", type=int, help="normals in the 1/TTC body mixture")

    p = sub.add_parser("ce", help="train IS proposals by cross-entropy")
    common(p)
    p.add_argument("--model", help="fitted model JSON")
    p.add_argument("--kind", choices=("piecewise", "single", "both"))
    p.add_argument("--ce-n", type=int, help="samples per CE iteration")
    p.add_argument("--ce-max-iter", type=int)
    p.add_argument("--pi-floor", type=float, help="floor on proposal piece weights")
    p.add_argument("--min-hits", type=int)
    p.add_argument("--max-samples", type=int, help="cap for CE sample-size growth")
    p.add_argument("--rho", type=float, help="hit fraction defining each relaxed level")
    _add_controller(p)

    p = sub.add_parser("eval", help="estimate the crash probability by importance sampling")
    common(p)
    p.add_argument("--model", help="fitted model JSON")
    p.add_argument("--proposal", action="append", help="proposal JSON (repeat for paired runs)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--min-samples", type=int)
    p.add_argument("--max-samples", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int, help="worker threads (default: logical cores)")
    p.add_argument("--crude-ttc", type=float, help="also run crude MC on the relaxed event min TTC <= this [s]")
    _add_controller(p)

    p = sub.add_parser("calibrate", help="long crude Monte Carlo run for a reference crash probability")
    common(p)
    p.add_argument("--model", help="model JSON")
    p.add_argument("--n", type=int, help="total samples")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)
    _add_controller(p)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    for k in PATH_KEYS:
        cfg.setdefault(k, None)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise CLIError(f"{args.config}: {exc.strerror}", EXIT_IO) from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: invalid JSON ({exc})", EXIT_CONFIG) from None
        if not isinstance(doc, dict):
            raise CLIError(f"{args.config}: expected a JSON object", EXIT_CONFIG)
        for key, val in doc.items():
            k = key.replace("-", "_")
            if k not in cfg:
                raise CLIError(f"{args.config}: unknown option {key!r} for {args.command}", EXIT_CONFIG)
            cfg[k] = val
    for k, v in vars(args).items():
        if k in cfg and v is not None and k != "config":
            cfg[k] = v
    cfg["config"] = args.config
    if cfg.get("out") is None:
        raise CLIError("--out is required", EXIT_CONFIG)
    if "workers" in cfg and cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in PATH_KEYS}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def meta(command: str, cfg: dict) -> dict:
    return {
        "tool": "rareeval",
        "version": __version__,
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "config": {k: v for k, v in sorted(cfg.items()) if k not in PATH_KEYS},
    }


def _controller(cfg: dict) -> AVControllerConfig:
    try:
        return AVControllerConfig(**{k: float(cfg[k]) for k in CONTROLLER})
    except ValueError as exc:
        raise CLIError(f"controller: {exc}", EXIT_CONFIG) from None


def _floats(text, name: str) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise CLIError(f"{name}: expected comma-separated numbers, got {text!r}", EXIT_CONFIG) from None


def _need(cfg: dict, key: str) -> Path:
    if not cfg.get(key):
        raise CLIError(f"--{key} is required", EXIT_CONFIG)
    p = Path(cfg[key])
    if not p.exists():
        raise CLIError(f"{p}: no such file", EXIT_IO)
    return p


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"{out}: {exc.strerror}", EXIT_IO) from None
    return out


def _jsonable(obj):
    """Non-finite floats become the "+inf"/"-inf" tokens used by model files."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return encode_float(obj) if not math.isnan(obj) else None
    return obj


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(doc), fh, indent=2, allow_nan=False)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})", EXIT_IO) from None


def load_model(path: Path) -> LaneChangeModel:
    doc = _read_json(path)
    try:
        return LaneChangeModel.from_dict(doc.get("model", doc))
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError(f"{path}: not a lane-change model ({exc})", EXIT_CONFIG) from None


def load_proposal(path: Path) -> ScenarioProposal:
    doc = _read_json(path)
    try:
        return ScenarioProposal.from_dict(doc.get("proposal", doc))
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError(f"{path}: not a proposal ({exc})", EXIT_CONFIG) from None


# -- commands ---------------------------------------------------------------------


def cmd_synth(cfg: dict) -> dict:
    out = _outdir(cfg)
    if int(cfg["n"]) < 1:
        raise CLIError("--n must be positive", EXIT_CONFIG)
    truth = make_synthetic_ground_truth(int(cfg["seed"]))
    write_events_csv(out / "events.csv", truth.generate(int(cfg["n"])))
    _write_json(out / "truth_model.json", {"meta": meta("synth", cfg), "model": truth.model.to_dict()})
    return {"events": str(out / "events.csv"), "model": str(out / "truth_model.json")}


def _cdf_series(x: np.ndarray, model, points: int = 1000):
    xs = np.sort(x)
    idx = np.unique(np.linspace(0, xs.size - 1, min(points, xs.size)).round().astype(int))
    grid = xs[idx]
    emp = np.searchsorted(xs, grid, side="right") / xs.size
    return grid, emp, np.asarray(model.cdf(grid), dtype=float)


def _write_cdf(out: Path, name: str, x: np.ndarray, model, title: str, xlabel: str) -> None:
    from rareeval.plots import plot_cdf

    grid, emp, fit = _cdf_series(x, model)
    with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "empirical_cdf", "fitted_cdf"))
        for row in zip(grid, emp, fit):
            w.writerow([repr(float(v)) for v in row])
    plot_cdf(grid, emp, fit, out / f"{name}.png", title=title, xlabel=xlabel)


def _clamp_to(x: np.ndarray, lower: float) -> np.ndarray:
    # Reciprocals of reciprocals can land one ulp below a bound they started on.
    near = (x < lower) & (x >= lower * (1 - 1e-12))
    return np.where(near, lower, x)


def cmd_fit(cfg: dict) -> dict:
    events = read_events_csv(_need(cfg, "events"))
    out = _outdir(cfg)
    v, r, u = events[:, 0], 1.0 / events[:, 1], 1.0 / events[:, 2]
    seg = segment_of(v)
    if (seg < 0).any():
        raise CLIError(f"lead speed {v[seg < 0][0]} lies outside [5, 35) m/s", EXIT_CONFIG)
    lower = float(cfg["range_lower"])
    r = _clamp_to(r, lower)
    em = EMConfig(m=int(cfg["em_components"]))
    rk = _floats(cfg["range_knots"], "range_knots")
    tk = _floats(cfg["ttc_knots"], "ttc_knots")
    try:
        range_cfg = FitConfig(rk, ("exp",) * (len(rk) + 1), lower=lower, em=em)
        ttc_cfg = FitConfig(tk, ("normal_mixture",) * len(tk) + ("exp",), lower=0.0, em=em)
    except ValueError as exc:
        raise CLIError(f"fit configuration: {exc}", EXIT_CONFIG) from None
    rfit = fit_piecewise_report(r, range_cfg)
    tfits = []
    for s in range(len(SEGMENTS)):
        us = u[seg == s]
        if us.size == 0:
            raise CLIError(f"no events in speed segment {SEGMENTS[s]}", EXIT_NUMERIC)
        tfits.append(fit_piecewise_report(us, ttc_cfg))
    model = LaneChangeModel(
        EmpiricalDistribution.from_observations(v), rfit.model, tuple(f.model for f in tfits), SEGMENTS
    )
    _write_json(out / "model.json", {"meta": meta("fit", cfg), "model": model.to_dict()})
    report = {
        "meta": meta("fit", cfg),
        "events": int(events.shape[0]),
        "inv_range": {"log_likelihood": rfit.log_likelihood, "pieces": rfit.pieces},
        "inv_ttc": [
            {"segment": list(SEGMENTS[s]), "events": int((seg == s).sum()), "log_likelihood": f.log_likelihood, "pieces": f.pieces}
            for s, f in enumerate(tfits)
        ],
    }
    _write_json(out / "fit_report.json", report)
    _write_cdf(out, "cdf_inv_range", r, rfit.model, "1/R", "1/R [1/m]")
    for s, f in enumerate(tfits):
        lo, hi = SEGMENTS[s]
        _write_cdf(out, f"cdf_inv_ttc_seg{s + 1}", u[seg == s], f.model, f"1/TTC, v_lead in [{lo:g}, {hi:g})", "1/TTC [1/s]")
    return {"model": str(out / "model.json"), "report": str(out / "fit_report.json")}


def cmd_ce(cfg: dict) -> dict:
    model = load_model(_need(cfg, "model"))
    out = _outdir(cfg)
    ctrl = _controller(cfg)
    try:
        ce_cfg = CEConfig(
            n_samples=int(cfg["ce_n"]),
            max_iter=int(cfg["ce_max_iter"]),
            pi_floor=float(cfg["pi_floor"]),
            min_hits=int(cfg["min_hits"]),
            max_samples=max(int(cfg["max_samples"]), int(cfg["ce_n"])),
        )
    except ValueError as exc:
        raise CLIError(f"CE configuration: {exc}", EXIT_CONFIG) from None
    kinds = ("piecewise", "single") if cfg["kind"] == "both" else (cfg["kind"],)
    written, levels = {}, {}
    for kind in kinds:
        trace_path = out / f"ce_trace_{kind}.jsonl"
        try:
            proposal, results = train_scenario_proposal(
                model, ctrl, kind, ce_cfg, int(cfg["seed"]), rho=float(cfg["rho"])
            )
        except CEError as exc:
            _write_trace(trace_path, kind, exc.states, getattr(exc, "segment", None))
            raise CLIError(f"CE ({kind}): {exc}; partial trace in {trace_path}", EXIT_NUMERIC) from None
        with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
            for s, res in enumerate(results):
                for st in res.states:
                    fh.write(json.dumps(dict(st.record(res.families), kind=kind, segment=s + 1), allow_nan=False) + "\n")
                levels[f"{kind} seg{s + 1}"] = [st.level for st in res.states]
        doc = {
            "meta": meta("ce", cfg),
            "converged": [res.converged for res in results],
            "proposal": proposal.to_dict(),
        }
        path = out / f"proposal_{kind}.json"
        _write_json(path, doc)
        written[kind] = str(path)
    from rareeval.plots import plot_ce_levels

    plot_ce_levels(levels, out / "ce_levels.png")
    return written


def _write_trace(path: Path, kind: str, states, segment) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for st in states:
            fh.write(json.dumps({"kind": kind, "segment": segment, "iteration": st.iteration, "level": st.level,
                                 "n": st.n, "hits": st.hits, "warnings": st.warnings}) + "\n")


def _rule(cfg: dict) -> StoppingRule:
    try:
        return StoppingRule(
            alpha=float(cfg["alpha"]),
            beta=float(cfg["beta"]),
            min_samples=int(cfg["min_samples"]),
            max_samples=int(cfg["max_samples"]),
            batch_size=int(cfg["batch_size"]),
        )
    except ValueError as exc:
        raise CLIError(f"stopping rule: {exc}", EXIT_CONFIG) from None


METHOD_TAGS = {"piecewise": "IS-piecewise", "single": "IS-single", "identity": "IS-identity"}


def cmd_eval(cfg: dict) -> dict:
    from rareeval.plots import plot_convergence

    model = load_model(_need(cfg, "model"))
    paths = cfg.get("proposal") or []
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise CLIError("--proposal is required", EXIT_CONFIG)
    proposals = []
    for p in paths:
        cfg_p = {"proposal": p}
        proposals.append(load_proposal(_need(cfg_p, "proposal")))
    out = _outdir(cfg)
    ctrl = _controller(cfg)
    rule = _rule(cfg)
    seed, workers = int(cfg["seed"]), int(cfg["workers"])

    def indicator(x):
        return crash_indicator(x, ctrl)

    reports, traces = [], {}
    for prop in proposals:
        tag = METHOD_TAGS.get(prop.kind, f"IS-{prop.kind}")
        rep = estimate_is(indicator, model, prop, rule, seed=seed, method=tag, workers=workers)
        name = tag.lower()
        if name in traces:
            name = f"{name}-{len(traces)}"
        write_trace_csv(rep, out / f"trace_{name}.csv")
        traces[name] = rep.trace
        reports.append(rep)
    if cfg.get("crude_ttc") is not None:
        t_ttc = float(cfg["crude_ttc"])

        def relaxed(x):
            return relaxed_indicator(x, ctrl, 0.0, t_ttc)

        rep = estimate_crude(relaxed, model, rule, seed=seed, workers=workers)
        write_trace_csv(rep, out / "trace_crude_relaxed.csv")
        reports.append(rep)
    doc = {"meta": meta("eval", cfg), "reports": []}
    for rep in reports:
        d = rep.to_dict()
        if rep.converged:
            d["required_samples_crude"] = _required(rep, rule.beta)
        doc["reports"].append(d)
    _write_json(out / "report.json", doc)
    plot_convergence(traces, out / "convergence.png", beta=rule.beta)
    return {"report": str(out / "report.json")}


def _required(rep, beta: float) -> int | None:
    if not 0 < rep.estimate < 1:
        return None
    return required_samples_crude(rep.estimate, 1 - rep.confidence, beta)


def cmd_calibrate(cfg: dict) -> dict:
    model = load_model(_need(cfg, "model"))
    out = _outdir(cfg)
    ctrl = _controller(cfg)
    n, batch = int(cfg["n"]), int(cfg["batch_size"])
    if n < 1 or batch < 1:
        raise CLIError("--n and --batch-size must be positive", EXIT_CONFIG)
    # Run to exactly n samples: the stopping rule only fires at max_samples.
    rule = StoppingRule(min_samples=n, max_samples=n, batch_size=min(batch, n))

    def indicator(x):
        return crash_indicator(x, ctrl)

    rep = estimate_crude(indicator, model, rule, seed=int(cfg["seed"]), workers=int(cfg["workers"]))
    se = math.sqrt(rep.variance / rep.n) if rep.n > 1 else math.inf
    doc = {"meta": meta("calibrate", cfg), "estimate": rep.estimate, "n": rep.n, "hits": rep.hits,
           "standard_error": se, "report": rep.to_dict()}
    _write_json(out / "crude_calibration.json", doc)
    return {"calibration": str(out / "crude_calibration.json")}


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "ce": cmd_ce, "eval": cmd_eval, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        written = COMMANDS[args.command](cfg)
    except CLIError as exc:
        print(f"rareeval {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (CEError, SupportMismatchError, EstimationError, FitError) as exc:
        print(f"rareeval {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ScenarioError as exc:
        print(f"rareeval {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"rareeval {args.command}: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"rareeval {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for k, v in written.items():
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
