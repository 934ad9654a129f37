import csv
import json
import math

import numpy as np
import pytest

from rareeval import __version__
from rareeval.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, main
from rareeval.scenario import SEGMENTS, LaneChangeModel, read_events_csv, segment_of, truth_model, write_events_csv

EVAL_FLAGS = ["--max-samples", "20000", "--workers", "1", "--crude-ttc", "1.0"]


def run_pipeline(out):
    out.mkdir(parents=True, exist_ok=True)
    d = str(out)
    assert main(["synth", "--out", d, "--n", "20000", "--seed", "1"]) == 0
    assert main(["fit", "--events", f"{d}/events.csv", "--out", d, "--seed", "1"]) == 0
    assert main(["ce", "--model", f"{d}/model.json", "--out", d, "--seed", "1"]) == 0
    assert main(["eval", "--model", f"{d}/model.json", "--proposal", f"{d}/proposal_piecewise.json",
                 "--proposal", f"{d}/proposal_single.json", "--out", d, "--seed", "1", *EVAL_FLAGS]) == 0
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run1"))


def load(path):
    return json.loads(path.read_text())


def test_end_to_end_byte_identical(pipeline, tmp_path):
    again = run_pipeline(tmp_path / "run2")
    names = sorted(p.name for p in pipeline.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for name in names:
        assert (pipeline / name).read_bytes() == (again / name).read_bytes(), name
    for png in ("convergence.png", "ce_levels.png", "cdf_inv_range.png", "cdf_inv_ttc_seg2.png"):
        assert (pipeline / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_every_json_has_meta(pipeline):
    for p in pipeline.glob("*.json"):
        m = load(p)["meta"]
        assert m["tool"] == "rareeval" and m["version"] == __version__ and m["seed"] == 1
        assert len(m["config_hash"]) == 16 and m["command"] in ("synth", "fit", "ce", "eval")


# -- synth --------------------------------------------------------------------------


def test_synth_outputs(pipeline):
    ev = read_events_csv(pipeline / "events.csv")
    assert ev.shape == (20000, 3)
    assert LaneChangeModel.from_dict(load(pipeline / "truth_model.json")["model"]) == truth_model()


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 50, "seed": 3}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert read_events_csv(tmp_path / "a" / "events.csv").shape[0] == 50
    assert load(tmp_path / "a" / "truth_model.json")["meta"]["seed"] == 3
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--n", "70"]) == 0
    assert read_events_csv(tmp_path / "b" / "events.csv").shape[0] == 70
    cfg.write_text(json.dumps({"out": str(tmp_path / "c"), "n": 5}))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert read_events_csv(tmp_path / "c" / "events.csv").shape[0] == 5


# -- fit -----------------------------------------------------------------------------


def test_fit_outputs(pipeline):
    doc = load(pipeline / "model.json")
    model = LaneChangeModel.from_dict(doc["model"])
    assert json.loads(json.dumps(model.to_dict())) == doc["model"]
    rep = load(pipeline / "fit_report.json")
    v = read_events_csv(pipeline / "events.csv")[:, 0]
    assert [s["events"] for s in rep["inv_ttc"]] == [int(np.sum(segment_of(v) == s)) for s in range(3)]
    for name in ("cdf_inv_range", "cdf_inv_ttc_seg1", "cdf_inv_ttc_seg2", "cdf_inv_ttc_seg3"):
        rows = list(csv.reader((pipeline / f"{name}.csv").read_text().splitlines()))
        assert rows[0] == ["x", "empirical_cdf", "fitted_cdf"] and len(rows) > 100
        vals = np.array(rows[1:], dtype=float)
        assert np.all(np.diff(vals[:, 0]) >= 0) and np.all((vals[:, 1:] >= 0) & (vals[:, 1:] <= 1 + 1e-12))


def test_segment_routing(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "3000", "--seed", "2"]) == 0
    ev = read_events_csv(tmp_path / "events.csv")
    assert main(["fit", "--events", str(tmp_path / "events.csv"), "--out", str(tmp_path / "a")]) == 0
    ev2 = ev.copy()
    ev2[0] = (16.0, 30.0, 5.0)
    write_events_csv(tmp_path / "e2.csv", ev2)
    assert main(["fit", "--events", str(tmp_path / "e2.csv"), "--out", str(tmp_path / "b")]) == 0
    a = load(tmp_path / "a" / "model.json")["model"]["inv_ttc"]
    b = load(tmp_path / "b" / "model.json")["model"]["inv_ttc"]
    seg0 = segment_of(ev[0, 0])[0]
    for s in range(3):
        if s not in (1, seg0):
            assert a[s] == b[s]
    assert a[1] != b[1]


def test_more_pieces_fit_at_least_as_well(pipeline, tmp_path):
    rep3 = load(pipeline / "fit_report.json")["inv_range"]["log_likelihood"]
    assert main(["fit", "--events", str(pipeline / "events.csv"), "--out", str(tmp_path), "--seed", "1",
                 "--range-knots", "0.05"]) == 0
    rep2 = load(tmp_path / "fit_report.json")["inv_range"]["log_likelihood"]
    assert rep3 >= rep2


# -- ce ------------------------------------------------------------------------------


def test_ce_traces(pipeline):
    for kind in ("piecewise", "single"):
        lines = [json.loads(s) for s in (pipeline / f"ce_trace_{kind}.jsonl").read_text().splitlines()]
        assert {r["kind"] for r in lines} == {kind}
        for seg in (1, 2, 3):
            recs = [r for r in lines if r["segment"] == seg]
            levels = [r["level"] for r in recs]
            assert all(b <= a for a, b in zip(levels, levels[1:]))
            assert recs[-1]["thresholds"] == {"t_range": 0.0, "t_ttc": 0.0}
            assert recs[0]["hits"] >= 1
        doc = load(pipeline / f"proposal_{kind}.json")
        assert doc["proposal"]["kind"] == kind and len(doc["converged"]) == 3


# -- eval ----------------------------------------------------------------------------


def read_trace(path):
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == ["n", "estimate", "ci_lo", "ci_hi", "rel_half_width"]
    return np.array(rows[1:], dtype=float)


def test_eval_outputs(pipeline):
    reps = load(pipeline / "report.json")["reports"]
    assert [r["method"] for r in reps] == ["IS-piecewise", "IS-single", "crude"]
    for r in reps[:2]:
        assert r["converged"] and r["rel_half_width"] < 0.2 and r["required_samples_crude"] > 1e5
    a = read_trace(pipeline / "trace_is-piecewise.csv")
    b = read_trace(pipeline / "trace_is-single.csv")
    short, long_ = sorted((a, b), key=len)
    # Paired runs check convergence on the same sample-count grid.
    assert np.array_equal(short[:, 0], long_[: len(short), 0])
    assert (pipeline / "trace_crude_relaxed.csv").exists()


# -- exit codes ----------------------------------------------------------------------


def test_exit_codes(tmp_path, pipeline, capsys):
    d = str(tmp_path)
    assert main(["synth"]) == EXIT_CONFIG
    bad_cfg = tmp_path / "cfg.json"
    bad_cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["synth", "--config", str(bad_cfg), "--out", d]) == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", d]) == EXIT_IO
    assert main(["fit", "--events", str(tmp_path / "missing.csv"), "--out", d]) == EXIT_IO
    (tmp_path / "bad.csv").write_text("v_lead_mps,range_m,ttc_s\n10,20,3\n10,oops,3\n")
    capsys.readouterr()
    assert main(["fit", "--events", str(tmp_path / "bad.csv"), "--out", d]) == EXIT_IO
    assert "line 3" in capsys.readouterr().err
    assert main(["eval", "--model", str(pipeline / "model.json"), "--proposal", str(pipeline / "proposal_single.json"),
                 "--out", d, "--dt", "0.5"]) == EXIT_CONFIG
    assert main(["ce", "--model", str(pipeline / "model.json"), "--out", d, "--ce-max-iter", "1",
                 "--kind", "piecewise"]) == EXIT_NUMERIC
    assert (tmp_path / "ce_trace_piecewise.jsonl").read_text().strip()


def test_support_mismatch_exit(pipeline, tmp_path):
    doc = load(pipeline / "proposal_piecewise.json")
    ttc = doc["proposal"]["inv_ttc"][0]
    ttc["proposal_weights"] = [1.0, 0.0]
    ttc["theta"] = [0.0, 0.0]
    (tmp_path / "p.json").write_text(json.dumps(doc))
    code = main(["eval", "--model", str(pipeline / "model.json"), "--proposal", str(tmp_path / "p.json"),
                 "--out", str(tmp_path), "--workers", "1"])
    assert code == EXIT_NUMERIC
