"""Cut-in lane-change scenario: stochastic model, AV longitudinal response and crash indicators.

Sample matrices have columns (v_lead [m/s], 1/range [1/m], 1/TTC [1/s]).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from rareeval.distributions import (
    BoundedExponential,
    BoundedNormalMixture,
    EmpiricalDistribution,
    PiecewiseMixture,
)
from rareeval.cross_entropy import (
    AdaptiveEventSchedule,
    CEConfig,
    CEError,
    PiecewiseFamily,
    SingleExponentialFamily,
    ce_iterate,
)
from rareeval.tilting import SupportMismatchError, TiltedPiecewise, check_support

SEGMENTS = ((5.0, 15.0), (15.0, 25.0), (25.0, 35.0))
EVENT_HEADER = ("v_lead_mps", "range_m", "ttc_s")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class AVControllerConfig:
    """Delayed full-braking controller.

    Braking starts once the instantaneous TTC has been below ``trigger_ttc``
    for ``reaction_delay`` seconds and holds ``max_decel`` until the follower
    stops. ``trigger_ttc = 0`` disables braking.
    """

    reaction_delay: float = 0.3
    trigger_ttc: float = 4.0
    max_decel: float = 8.0
    dt: float = 0.01
    horizon: float = 10.0

    def __post_init__(self):
        if self.reaction_delay < 0 or self.trigger_ttc < 0:
            raise ValueError("reaction delay and trigger TTC must be nonnegative")
        if not (self.max_decel > 0 and self.horizon > 0):
            raise ValueError("deceleration and horizon must be positive")
        if not 0 < self.dt <= 0.1:
            raise ValueError("timestep must lie in (0, 0.1] s")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def delay_steps(self) -> int:
        return int(round(self.reaction_delay / self.dt))


@dataclass(frozen=True)
class CutInInitialState:
    v_lead: float
    range0: float
    range_rate0: float  # negative while closing

    def __post_init__(self):
        vals = (self.v_lead, self.range0, self.range_rate0)
        if not all(math.isfinite(v) for v in vals):
            raise ScenarioError(f"non-finite initial state {vals}")
        if not self.range0 > 0:
            raise ScenarioError("initial range must be positive")

    @property
    def v_follow(self) -> float:
        return self.v_lead - self.range_rate0

    @property
    def ttc0(self) -> float:
        return -self.range0 / self.range_rate0 if self.range_rate0 < 0 else math.inf

    @classmethod
    def from_inverses(cls, v_lead: float, inv_range: float, inv_ttc: float) -> "CutInInitialState":
        r0 = 1.0 / inv_range
        return cls(v_lead, r0, -r0 * inv_ttc)


@dataclass
class CutInResult:
    times: np.ndarray
    ranges: np.ndarray
    min_range: float  # clipped at 0 on contact
    min_ttc: float
    crashed: bool


def simulate_cut_in(s: CutInInitialState, ctrl: AVControllerConfig) -> CutInResult:
    """Forward-Euler simulation; the lead holds speed and the follower brakes per the controller."""
    dt, K, nd = ctrl.dt, ctrl.steps, ctrl.delay_steps
    R, vl, vf = s.range0, s.v_lead, s.v_follow
    trig = None
    times, ranges = [], []
    min_ttc = math.inf
    crashed = False
    for k in range(K + 1):
        times.append(k * dt)
        closing = vf - vl
        if R <= 0:
            ranges.append(0.0)
            crashed = True
            min_ttc = 0.0
            break
        ranges.append(R)
        ttc = R / closing if closing > 0 else math.inf
        min_ttc = min(min_ttc, ttc)
        if trig is None and ttc < ctrl.trigger_ttc:
            trig = k
        if k == K:
            break
        braking = trig is not None and k >= trig + nd
        acc = -ctrl.max_decel if braking and vf > 0 else 0.0
        R = R - closing * dt
        vf = max(vf + acc * dt, 0.0)
    r = np.asarray(ranges)
    return CutInResult(np.asarray(times), r, float(r.min()), min_ttc, crashed)


def batch_outcomes(inv_range, inv_ttc, ctrl: AVControllerConfig, need_ttc: bool = True):
    """Minimum range (clipped at 0) and minimum TTC for many scenarios at once.

    Uses the exact solution of the same Euler recurrence as ``simulate_cut_in``:
    constant closing speed until braking, then closing speed falling by
    max_decel * dt per step. Only the TTC minimum during braking is stepped.
    """
    r = np.asarray(inv_range, dtype=float)
    u = np.asarray(inv_ttc, dtype=float)
    dt, K, nd, a, T = ctrl.dt, ctrl.steps, ctrl.delay_steps, ctrl.max_decel, ctrl.trigger_ttc
    with np.errstate(divide="ignore", invalid="ignore"):
        R0 = 1.0 / r
        c = R0 * u
        ttc0 = 1.0 / u
    safe = ~(np.isfinite(R0) & (c > 0) & np.isfinite(c))
    c = np.where(safe, 1.0, c)
    R0 = np.where(safe, 1.0, R0)
    ttc0 = np.where(safe, math.inf, ttc0)

    # Coasting steps before the trigger, then the reaction delay.
    k_trig = np.where(ttc0 >= T, np.floor((ttc0 - T) / dt) + 1.0, 0.0)
    k_b = k_trig + nd
    coast_end = np.minimum(k_b, K)
    R_b = R0 - coast_end * c * dt
    brakes = k_b < K
    # Braking: closing speed after j steps is c - j a dt; range falls while it is positive.
    J = np.ceil(c / (a * dt))
    j_star = np.where(brakes, np.minimum(J, K - k_b), 0.0)
    min_range = R_b - dt * (j_star * c - a * dt * j_star * (j_star - 1) / 2.0)
    # Coasting alone can reach contact before braking starts.
    min_range = np.maximum(min_range, 0.0)
    min_range = np.where(R_b <= 0, 0.0, min_range)
    min_range = np.where(safe, np.where(np.isfinite(1.0 / r), 1.0 / r, math.inf), min_range)

    if not need_ttc:
        return min_range, None
    min_ttc = np.where(R_b > 0, R_b / c, 0.0)
    active = np.flatnonzero(brakes & (min_range > 0) & ~safe)
    if active.size:
        cc = c[active]
        Rj = R_b[active].copy()
        best = min_ttc[active].copy()
        left = (K - k_b[active]).astype(np.int64)
        closing = cc.copy()
        j = 0
        live = np.ones(active.size, dtype=bool)
        while live.any():
            # Step j -> j+1 using the closing speed at step j.
            Rj = Rj - closing * dt
            closing = closing - a * dt
            j += 1
            live &= (closing > 0) & (j <= left)
            ttc = np.where(live, Rj / np.where(closing > 0, closing, 1.0), math.inf)
            best = np.minimum(best, ttc)
        min_ttc[active] = best
    min_ttc = np.where(safe, math.inf, min_ttc)
    min_ttc = np.where(min_range <= 0, 0.0, min_ttc)
    return min_range, min_ttc


def crash_indicator(x, ctrl: AVControllerConfig) -> np.ndarray:
    """1 where the range reaches zero within the horizon. ``x`` has columns (v, 1/R, 1/TTC)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mr, _ = batch_outcomes(x[:, 1], x[:, 2], ctrl, need_ttc=False)
    return (mr <= 0).astype(float)


def relaxed_indicator(x, ctrl: AVControllerConfig, t_range: float, t_ttc: float) -> np.ndarray:
    """1 where the range falls to t_range or the TTC falls to t_ttc within the horizon."""
    if t_range < 0 or t_ttc < 0:
        raise ValueError("thresholds must be nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mr, mt = batch_outcomes(x[:, 1], x[:, 2], ctrl, need_ttc=t_ttc > 0)
    hit = mr <= t_range
    if mt is not None:
        hit |= mt <= t_ttc
    return hit.astype(float)


class CrashEvent:
    """Crash as a CE target over samples with columns (1/R, 1/TTC).

    Level L relaxes the crash to thresholds (L * ref_range, L * ref_ttc).
    ``ref_range = 0`` (the default) relaxes only the TTC threshold: a range
    threshold is met by short gaps that close slowly, which pulls the proposal
    away from the crash region.
    """

    def __init__(self, ctrl: AVControllerConfig, ref_range: float = 0.0, ref_ttc: float = 1.0):
        if ref_range < 0 or not ref_ttc > 0:
            raise ValueError("need ref_range >= 0 and ref_ttc > 0")
        self.ctrl = ctrl
        self.ref_range = ref_range
        self.ref_ttc = ref_ttc

    def score(self, x, context=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mr, mt = batch_outcomes(x[:, 0], x[:, 1], self.ctrl)
        g = mt / self.ref_ttc
        if self.ref_range > 0:
            g = np.minimum(g, mr / self.ref_range)
        return g

    def thresholds(self, level: float) -> dict:
        return {"t_range": level * self.ref_range, "t_ttc": level * self.ref_ttc}

    def indicator(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mr, _ = batch_outcomes(x[:, 0], x[:, 1], self.ctrl, need_ttc=False)
        return (mr <= 0).astype(float)


# -- stochastic model ---------------------------------------------------------


def segment_of(v, segments: Sequence = SEGMENTS) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    out = np.full(v.shape, -1, dtype=np.int64)
    for i, (lo, hi) in enumerate(segments):
        out[(v >= lo) & (v < hi)] = i
    return out


@dataclass(frozen=True)
class LaneChangeModel:
    """f(v, R, TTC) = f(v) f(1/R) f(1/TTC | segment of v)."""

    v_lead: EmpiricalDistribution
    inv_range: PiecewiseMixture
    inv_ttc: tuple
    segments: tuple = SEGMENTS

    def __post_init__(self):
        object.__setattr__(self, "inv_ttc", tuple(self.inv_ttc))
        object.__setattr__(self, "segments", tuple(tuple(float(b) for b in s) for s in self.segments))
        if len(self.inv_ttc) != len(self.segments):
            raise ValueError("need one 1/TTC model per speed segment")
        seg = segment_of(self.v_lead.values, self.segments)
        if (seg < 0).any():
            bad = np.asarray(self.v_lead.values)[seg < 0][0]
            raise ScenarioError(f"lead speed {bad} lies outside every segment")
        for d in (self.inv_range, *self.inv_ttc):
            if d.lower < 0:
                raise ValueError("inverse range and inverse TTC models must live on [0, inf)")

    def segment_mass(self) -> np.ndarray:
        return np.array([self.v_lead.mass(lo, hi) for lo, hi in self.segments])

    def range_model(self, segment: int) -> PiecewiseMixture:
        return self.inv_range

    def ttc_model(self, segment: int) -> PiecewiseMixture:
        return self.inv_ttc[segment]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _sample_joint(self.v_lead, self.segments, self.range_model, self.ttc_model, rng, n)

    def logpdf(self, x) -> np.ndarray:
        """Log density of (1/R, 1/TTC) given the lead speed; the lead-speed law is shared by every proposal."""
        return _joint_logpdf(x, self.segments, self.range_model, self.ttc_model)

    def to_dict(self) -> dict:
        return {
            "segments": [list(s) for s in self.segments],
            "v_lead": self.v_lead.to_dict(),
            "inv_range": self.inv_range.to_dict(),
            "inv_ttc": [d.to_dict() for d in self.inv_ttc],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LaneChangeModel":
        return cls(
            EmpiricalDistribution.from_dict(doc["v_lead"]),
            PiecewiseMixture.from_dict(doc["inv_range"]),
            tuple(PiecewiseMixture.from_dict(d) for d in doc["inv_ttc"]),
            tuple(tuple(s) for s in doc.get("segments", SEGMENTS)),
        )


def _sample_joint(v_law, segments, range_model, ttc_model, rng, n) -> np.ndarray:
    v = v_law.sample(rng, n)
    uni = rng.random((n, 2))
    seg = segment_of(v, segments)
    if (seg < 0).any():
        raise ScenarioError(f"lead speed {v[seg < 0][0]} lies outside every segment")
    r = np.empty(n)
    u = np.empty(n)
    for s in range(len(segments)):
        sel = seg == s
        if sel.any():
            r[sel] = np.asarray(range_model(s).ppf(uni[sel, 0])).reshape(-1)
            u[sel] = np.asarray(ttc_model(s).ppf(uni[sel, 1])).reshape(-1)
    return np.column_stack([v, r, u])


def _joint_logpdf(x, segments, range_model, ttc_model) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    seg = segment_of(x[:, 0], segments)
    out = np.full(x.shape[0], -np.inf)
    for s in range(len(segments)):
        sel = seg == s
        if sel.any():
            out[sel] = np.asarray(range_model(s).logpdf(x[sel, 1])).reshape(-1) + np.asarray(
                ttc_model(s).logpdf(x[sel, 2])
            ).reshape(-1)
    return out


@dataclass(frozen=True)
class ScenarioProposal:
    """IS proposal over the lane-change model: per-segment proposals for 1/R and 1/TTC, lead speed untilted."""

    v_lead: EmpiricalDistribution
    inv_range: tuple  # one proposal per segment
    inv_ttc: tuple
    segments: tuple = SEGMENTS
    kind: str = "piecewise"

    def range_model(self, segment: int):
        return self.inv_range[segment]

    def ttc_model(self, segment: int):
        return self.inv_ttc[segment]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _sample_joint(self.v_lead, self.segments, self.range_model, self.ttc_model, rng, n)

    def logpdf(self, x) -> np.ndarray:
        return _joint_logpdf(x, self.segments, self.range_model, self.ttc_model)

    def check_support(self, model: LaneChangeModel) -> None:
        if self.v_lead != model.v_lead or tuple(self.segments) != tuple(model.segments):
            raise SupportMismatchError("proposal lead-speed law or segments differ from the model's")
        for s in range(len(self.segments)):
            check_support(model.range_model(s), self.range_model(s))
            check_support(model.ttc_model(s), self.ttc_model(s))

    @classmethod
    def identity(cls, model: LaneChangeModel) -> "ScenarioProposal":
        k = len(model.segments)
        return cls(model.v_lead, (model.inv_range,) * k, model.inv_ttc, model.segments, "identity")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "segments": [list(s) for s in self.segments],
            "v_lead": self.v_lead.to_dict(),
            "inv_range": [d.to_dict() for d in self.inv_range],
            "inv_ttc": [d.to_dict() for d in self.inv_ttc],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioProposal":
        def load(d):
            return TiltedPiecewise.from_dict(d) if "theta" in d else PiecewiseMixture.from_dict(d)

        return cls(
            EmpiricalDistribution.from_dict(doc["v_lead"]),
            tuple(load(d) for d in doc["inv_range"]),
            tuple(load(d) for d in doc["inv_ttc"]),
            tuple(tuple(seg) for seg in doc.get("segments", SEGMENTS)),
            doc.get("kind", "piecewise"),
        )


PROPOSAL_FAMILIES = {"piecewise": PiecewiseFamily, "single": SingleExponentialFamily}


def train_scenario_proposal(
    model: LaneChangeModel,
    ctrl: AVControllerConfig,
    kind: str = "piecewise",
    config: CEConfig = CEConfig(),
    seed: int = 0,
    event: Optional[CrashEvent] = None,
    rho: float = 0.1,
) -> tuple:
    """CE-train 1/R and 1/TTC proposals independently for every speed segment.

    Returns the joint proposal and one CEResult per segment.
    """
    if kind not in PROPOSAL_FAMILIES:
        raise ValueError(f"unknown proposal kind {kind!r}; expected one of {sorted(PROPOSAL_FAMILIES)}")
    fam = PROPOSAL_FAMILIES[kind]
    event = event or CrashEvent(ctrl)
    schedule = AdaptiveEventSchedule(rho=rho)
    ranges, ttcs, results = [], [], []
    for s in range(len(model.segments)):
        fams = [fam(model.range_model(s)), fam(model.ttc_model(s))]
        try:
            res = ce_iterate(fams, event, config, schedule, seed=np.random.SeedSequence(seed, spawn_key=(s,)))
        except CEError as exc:
            exc.segment = s + 1
            raise
        ranges.append(res.proposals[0])
        ttcs.append(res.proposals[1])
        results.append(res)
    return ScenarioProposal(model.v_lead, tuple(ranges), tuple(ttcs), model.segments, kind), results


def sample_scenario(model: LaneChangeModel, rng: np.random.Generator) -> CutInInitialState:
    v, r, u = model.sample(rng, 1)[0]
    return CutInInitialState.from_inverses(v, r, u)


# -- synthetic ground truth -----------------------------------------------------

# Documented "true" model standing in for naturalistic data. 1/R has a three-piece
# exponential law on [0.02, inf) 1/m (ranges up to 50 m); 1/TTC per speed segment
# has a two-normal body on [0, 0.4) 1/s and an exponential tail above 0.4. With the
# default controller the crash probability is about 1.1e-5 and every crash has
# 1/TTC in the tail.
TRUTH_RANGE = {
    "truncations": (0.02, 0.05, 0.1, math.inf),
    "weights": (0.3, 0.5, 0.2),
    "rates": (20.0, 10.0, 15.0),
}
TRUTH_TTC = (
    {"knot": 0.4, "tail_weight": 0.05, "p": (0.6, 0.4), "sigma": (0.05, 0.128), "tail_rate": 38.0},
    {"knot": 0.4, "tail_weight": 0.04, "p": (0.55, 0.45), "sigma": (0.05, 0.119), "tail_rate": 40.0},
    {"knot": 0.4, "tail_weight": 0.035, "p": (0.5, 0.5), "sigma": (0.04, 0.111), "tail_rate": 42.0},
)


def truth_lead_speed() -> EmpiricalDistribution:
    v = np.round(np.arange(5.05, 35.0, 0.1), 2)
    counts = np.rint(1000.0 * np.exp(-(((v - 20.0) / 12.0) ** 2))).astype(int) + 1
    return EmpiricalDistribution(tuple(v.tolist()), tuple(counts.tolist()))


def truth_range_model() -> PiecewiseMixture:
    t = TRUTH_RANGE["truncations"]
    pieces = tuple(
        BoundedExponential(rate=lam, lower=t[i], upper=t[i + 1]) for i, lam in enumerate(TRUTH_RANGE["rates"])
    )
    return PiecewiseMixture(t, TRUTH_RANGE["weights"], pieces)


def truth_ttc_model(params: dict) -> PiecewiseMixture:
    g = params["knot"]
    body = BoundedNormalMixture(params["p"], params["sigma"], 0.0, g)
    tail = BoundedExponential(rate=params["tail_rate"], lower=g, upper=math.inf)
    w = params["tail_weight"]
    return PiecewiseMixture((0.0, g, math.inf), (1.0 - w, w), (body, tail))


def truth_model() -> LaneChangeModel:
    return LaneChangeModel(truth_lead_speed(), truth_range_model(), tuple(truth_ttc_model(s) for s in TRUTH_TTC))


@dataclass
class SyntheticTruth:
    model: LaneChangeModel
    seed: int

    def generate(self, n: int) -> np.ndarray:
        """n events as rows (v_lead [m/s], range [m], ttc [s])."""
        x = self.model.sample(np.random.default_rng(self.seed), n)
        r = np.maximum(x[:, 1], np.finfo(float).tiny)
        u = np.maximum(x[:, 2], np.finfo(float).tiny)
        return np.column_stack([x[:, 0], 1.0 / r, 1.0 / u])


def make_synthetic_ground_truth(seed: int = 0) -> SyntheticTruth:
    return SyntheticTruth(truth_model(), seed)


# -- event CSV --------------------------------------------------------------------


def write_events_csv(path, events: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for row in np.asarray(events, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_events_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENT_HEADER:
            raise ScenarioError(f"{path}: line 1: expected header {','.join(EVENT_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ScenarioError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ScenarioError(f"{path}: line {line_no}: {exc}") from None
            if not all(math.isfinite(v) for v in vals) or vals[1] <= 0 or vals[2] <= 0:
                raise ScenarioError(f"{path}: line {line_no}: range and ttc must be positive and finite")
            rows.append(vals)
    if not rows:
        raise ScenarioError(f"{path}: no events")
    return np.asarray(rows)
