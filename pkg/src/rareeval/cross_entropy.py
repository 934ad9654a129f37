"""Cross-entropy training of importance-sampling proposals.

A CE run draws a batch from the current proposals, picks the relaxed event
for the iteration, weights each draw by c_n = I(x_n in event) f(x_n)/f_s(x_n)
and refits every variable's proposal by weighted maximum likelihood inside
its family. Independent variables share c_n and are updated separately.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from rareeval._numeric import maximize_scalar
from rareeval.distributions import (
    BoundedExponential,
    BoundedNormal,
    BoundedNormalMixture,
    PiecewiseMixture,
)
from rareeval.fitting import weighted_exponential_rate
from rareeval.tilting import THETA_MARGIN, TiltedPiecewise, log_likelihood_ratio, log_mgf

log = logging.getLogger(__name__)


class CEError(RuntimeError):
    """Cross-entropy run cannot continue; ``states`` holds the trace so far."""

    def __init__(self, message: str, states=None):
        super().__init__(message)
        self.states = list(states or [])


@dataclass(frozen=True)
class CEConfig:
    n_samples: int = 1000
    max_iter: int = 30
    tol: float = 1e-3
    patience: int = 2
    pi_floor: float = 0.01
    min_hits: int = 10
    materiality: float = 0.05
    max_samples: int = 8000
    shift_step: object = 0.0  # float, or one float per variable; 0 disables truncation shifting
    max_shifts: int = 50

    def __post_init__(self):
        if self.n_samples < 1 or self.max_iter < 1 or self.patience < 1:
            raise ValueError("n_samples, max_iter and patience must be positive")
        if not 0.0 < self.pi_floor < 1.0:
            raise ValueError("pi_floor must lie in (0, 1)")
        if self.max_samples < self.n_samples:
            raise ValueError("max_samples must be at least n_samples")

    def step_for(self, v: int) -> float:
        s = self.shift_step
        return float(s[v]) if isinstance(s, (list, tuple)) else float(s)


# -- events and schedules ---------------------------------------------------


class TailEvent:
    """{x[:, column] >= threshold}; the score is the remaining distance to the threshold."""

    def __init__(self, threshold: float, column: int = 0):
        self.threshold = threshold
        self.column = column

    def score(self, x, context=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        col = x if x.ndim == 1 else x[:, self.column]
        return np.maximum(self.threshold - col, 0.0)

    def thresholds(self, level: float) -> dict:
        return {"x": self.threshold - level}


@dataclass(frozen=True)
class AdaptiveEventSchedule:
    """Nested relaxed events {score <= level_t} shrinking to level 0.

    With ``levels`` unset, each level is the smallest one at which a fraction
    ``rho`` of the current batch would have hit, never above the previous
    level. A fixed nonincreasing sequence ending at 0 may be given instead.
    """

    rho: float = 0.1
    levels: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.levels is not None:
            lv = tuple(float(v) for v in self.levels)
            if not lv or lv[-1] != 0.0 or any(b > a for a, b in zip(lv, lv[1:])) or min(lv) < 0:
                raise ValueError("fixed levels must be nonnegative, nonincreasing and end at 0")
            object.__setattr__(self, "levels", lv)

    def next_level(self, scores: np.ndarray, previous: float, iteration: int) -> float:
        if self.levels is not None:
            return min(self.levels[min(iteration - 1, len(self.levels) - 1)], previous)
        s = np.sort(np.asarray(scores, dtype=float))
        q = s[max(int(math.ceil(self.rho * s.size)) - 1, 0)]
        return float(min(previous, max(q, 0.0)))


# -- per-piece updates --------------------------------------------------------


def apply_floor(raw: Sequence[float], floor: float) -> tuple:
    """Raise weights below ``floor`` to it and rescale the rest to keep the total at 1."""
    w = np.asarray(raw, dtype=float)
    k = w.size
    if not 0.0 < floor < 1.0 / k:
        raise ValueError(f"floor {floor} must lie in (0, 1/{k})")
    fixed = np.zeros(k, dtype=bool)
    out = w.copy()
    while True:
        low = (out < floor) & ~fixed
        if not low.any():
            break
        fixed |= low
        free_mass = 1.0 - floor * fixed.sum()
        free_raw = w[~fixed].sum()
        out = np.where(fixed, floor, w * (free_mass / free_raw) if free_raw > 0 else 0.0)
    return tuple(out.tolist())


def ce_update_weights(piece_idx, c, k: int, floor: Optional[float] = None) -> tuple:
    """pi_i = sum_{S_i} c_n / sum c_n, then floored."""
    c = np.asarray(c, dtype=float)
    total = c.sum()
    if not total > 0:
        raise CEError("no rare events in batch")
    raw = np.bincount(np.asarray(piece_idx), weights=c, minlength=k)[:k] / total
    raw = raw / raw.sum()
    return tuple(raw.tolist()) if floor is None else apply_floor(raw, floor)


def ce_update_theta_exponential(piece: BoundedExponential, x, c, xtol: float = 1e-10) -> float:
    """Tilt maximizing sum c_n (theta X_n - kappa(theta)); the tilted rate is a weighted bounded-exp MLE."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    rate = weighted_exponential_rate(float(c.sum()), float(np.dot(c, x - piece.lower)), piece.width, xtol)
    return min(piece.rate - rate, piece.rate - 2 * THETA_MARGIN)


def ce_exponential_objective(theta: float, piece: BoundedExponential, x, c) -> float:
    """sum c_n (theta X_n - ln[(e^{-(l-theta) g0} - e^{-(l-theta) g1}) / (l - theta)])."""
    r = piece.rate - theta
    if not r > 0:
        return -math.inf
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    log_mass = -r * piece.lower + math.log(-math.expm1(-r * piece.width))
    return float(theta * np.dot(c, x) - c.sum() * (log_mass - math.log(r)))


def ce_normal_objective(theta: float, piece: BoundedNormal, x, c) -> float:
    """sum c_n X_n theta - (sum c_n)(sigma^2 theta^2 / 2 + ln[mass(theta) / mass(0)])."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    return float(theta * np.dot(c, x) - c.sum() * log_mgf(piece, theta))


def ce_update_theta_normal(piece: BoundedNormal, x, c, xtol: float = 1e-10) -> float:
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    s2 = piece.sigma**2
    sc, scx = float(c.sum()), float(np.dot(c, x))
    mean = scx / sc
    if math.isinf(piece.lower) and math.isinf(piece.upper):
        return (mean - piece.mu) / s2

    # Search over the tilted mean shift theta * sigma^2, which is on the data scale.
    def obj(shift: float) -> float:
        th = shift / s2
        return th * scx - sc * log_mgf(piece, th)

    shift = maximize_scalar(obj, mean - piece.mu - 5 * piece.sigma, mean - piece.mu + 5 * piece.sigma,
                            xtol=xtol * max(1.0, piece.sigma), expand=1.0)
    return shift / s2


def ce_update_theta_mixture(piece: BoundedNormalMixture, x, c, xtol: float = 1e-10) -> float:
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    s2 = max(piece.sigmas) ** 2
    sc, scx = float(c.sum()), float(np.dot(c, x))

    def obj(shift: float) -> float:
        th = shift / s2
        return th * scx - sc * log_mgf(piece, th)

    sd = math.sqrt(s2)
    shift = maximize_scalar(obj, scx / sc - 5 * sd, scx / sc + 5 * sd, xtol=xtol * max(1.0, sd), expand=1.0)
    return shift / s2


def ce_update_theta(piece, x, c) -> float:
    if isinstance(piece, BoundedExponential):
        return ce_update_theta_exponential(piece, x, c)
    if isinstance(piece, BoundedNormal):
        return ce_update_theta_normal(piece, x, c)
    if isinstance(piece, BoundedNormalMixture):
        return ce_update_theta_mixture(piece, x, c)
    raise TypeError(f"no CE update for {type(piece).__name__}")


def ce_theta_fallback(previous: Optional[float]) -> float:
    """Tilt for a piece without hits: last iteration's value, or 0 (the real distribution) on the first."""
    return 0.0 if previous is None else float(previous)


def max_tail_weight(k: int, floor: float) -> float:
    return 1.0 - (k - 1) * floor


def shift_truncations(proposal: TiltedPiecewise, step: float) -> TiltedPiecewise:
    """Move every truncation except the lowest up by ``step``; pieces are renormalized on the new grid."""
    if step == 0:
        return proposal
    t = proposal.truncations
    shifted = (t[0],) + tuple(v + step for v in t[1:])
    return proposal.with_parameters(proposal.thetas, proposal.proposal_weights, shifted)


def adjust_sample_size(hit_counts, proposal_weights, n: int, config: CEConfig) -> tuple:
    """Next batch size and a warning (or None).

    Doubles ``n`` (capped at ``config.max_samples``) when a piece whose
    proposal weight exceeds ``config.materiality`` has fewer than
    ``config.min_hits`` hits. Arguments are per-variable lists.
    """
    short = any(
        h < config.min_hits
        for hits, weights in zip(hit_counts, proposal_weights)
        for h, w in zip(hits, weights)
        if w > config.materiality
    )
    if not short:
        return max(n, config.n_samples), None
    if n >= config.max_samples:
        return n, f"sample size cap {config.max_samples} reached with under-populated pieces"
    return min(2 * n, config.max_samples), None


# -- proposal families ----------------------------------------------------------


class PiecewiseFamily:
    """Piecewise proposals: per-piece tilts and reweighted proportions over the base."""

    kind = "piecewise"

    def __init__(self, base: PiecewiseMixture):
        self.base = base

    def initial(self) -> TiltedPiecewise:
        return TiltedPiecewise.identity(self.base)

    def piece_index(self, proposal: TiltedPiecewise, x) -> np.ndarray:
        return proposal.piece_index(x)

    def piece_weights(self, proposal: TiltedPiecewise) -> tuple:
        return proposal.proposal_weights

    def params(self, proposal: TiltedPiecewise) -> np.ndarray:
        return np.concatenate([proposal.thetas, proposal.proposal_weights])

    def tail_at_max(self, proposal: TiltedPiecewise, floor: float) -> bool:
        k = proposal.k
        return k > 1 and proposal.proposal_weights[-1] >= max_tail_weight(k, floor) - 1e-12

    def shift(self, proposal: TiltedPiecewise, step: float) -> TiltedPiecewise:
        return shift_truncations(proposal, step)

    def update(self, proposal: TiltedPiecewise, x, c, config: CEConfig, first: bool):
        k = proposal.k
        idx = proposal.piece_index(x)
        weights = ce_update_weights(idx, c, k, config.pi_floor if k > 1 else None)
        thetas, low_conf = [], []
        t = proposal.truncations
        for i, piece in enumerate(self.base.pieces):
            sel = (idx == i) & (c > 0)
            if not sel.any():
                thetas.append(ce_theta_fallback(None if first else proposal.thetas[i]))
                low_conf.append(i)
                continue
            local = piece if (piece.lower, piece.upper) == (t[i], t[i + 1]) else piece.rebound(t[i], t[i + 1])
            thetas.append(ce_update_theta(local, x[sel], c[sel]))
        new = proposal.with_parameters(thetas, weights)
        return new, {"fallback_pieces": low_conf}

    def describe(self, proposal: TiltedPiecewise) -> dict:
        d = {"theta": list(proposal.thetas), "proposal_weights": list(proposal.proposal_weights)}
        if proposal.shifted:
            d["truncations"] = list(proposal.truncations)
        return d


def distribution_mean(d: PiecewiseMixture) -> float:
    """Mean of a piecewise mixture with a nonnegative-tailed support, by quadrature of 1 - F."""
    total = d.lower
    for i, (lo, hi) in enumerate(zip(d.truncations, d.truncations[1:])):
        val, _ = integrate.quad(lambda v: 1.0 - float(d.cdf(v)), lo, hi, limit=200)
        total += val
    return total


class SingleExponentialFamily:
    """One bounded exponential over the whole base support; the single-parametric benchmark."""

    kind = "single"

    def __init__(self, base: PiecewiseMixture, initial_rate: Optional[float] = None):
        self.base = base
        self.initial_rate = initial_rate

    def _make(self, rate: float) -> PiecewiseMixture:
        piece = BoundedExponential(rate=rate, lower=self.base.lower, upper=self.base.upper)
        return PiecewiseMixture((self.base.lower, self.base.upper), (1.0,), (piece,))

    def initial(self) -> PiecewiseMixture:
        rate = self.initial_rate
        if rate is None:
            rate = 1.0 / (distribution_mean(self.base) - self.base.lower)
        return self._make(rate)

    def piece_index(self, proposal, x) -> np.ndarray:
        return proposal.piece_index(x)

    def piece_weights(self, proposal) -> tuple:
        return (1.0,)

    def params(self, proposal) -> np.ndarray:
        return np.array([proposal.pieces[0].rate])

    def tail_at_max(self, proposal, floor: float) -> bool:
        return False

    def shift(self, proposal, step: float):
        return proposal

    def update(self, proposal, x, c, config: CEConfig, first: bool):
        sel = c > 0
        if not sel.any():
            return proposal, {"fallback_pieces": [0]}
        piece = proposal.pieces[0]
        rate = weighted_exponential_rate(float(c[sel].sum()), float(np.dot(c[sel], x[sel] - piece.lower)), piece.width)
        return self._make(rate), {"fallback_pieces": []}

    def describe(self, proposal) -> dict:
        return {"rate": proposal.pieces[0].rate}


# -- the CE loop -----------------------------------------------------------------


@dataclass
class CEState:
    iteration: int
    level: float
    thresholds: Optional[dict]
    n: int
    hits: int
    samples: np.ndarray
    weights: np.ndarray  # c_n
    sampling: list  # proposals the batch was drawn from
    updated: list  # proposals fitted on this batch
    change: float
    shifts: int = 0
    warnings: list = field(default_factory=list)
    fallback: list = field(default_factory=list)

    def record(self, families) -> dict:
        """JSON-ready trace line."""
        return {
            "iteration": self.iteration,
            "level": self.level,
            "thresholds": self.thresholds,
            "n": self.n,
            "hits": self.hits,
            "change": None if not math.isfinite(self.change) else self.change,
            "shifts": self.shifts,
            "variables": [
                dict(f.describe(p), fallback_pieces=fb) for f, p, fb in zip(families, self.updated, self.fallback)
            ],
            "warnings": self.warnings,
        }


@dataclass
class CEResult:
    states: list
    proposals: list
    converged: bool
    families: list = field(default_factory=list)

    @property
    def final(self) -> CEState:
        return self.states[-1]


def _draw(families, proposals, rng, n, context):
    cols, logw = [], np.zeros(n)
    for fam, prop in zip(families, proposals):
        x = prop.sample(rng, n)
        logw += log_likelihood_ratio(fam.base, prop, x)
        cols.append(x)
    ctx = context.sample(rng, n) if context is not None else None
    return np.column_stack(cols), logw, ctx


def _concat_ctx(a, b):
    if a is None:
        return None
    return np.concatenate([a, b])


def ce_iterate(
    families: Sequence,
    event,
    config: CEConfig = CEConfig(),
    schedule: AdaptiveEventSchedule = AdaptiveEventSchedule(),
    seed: int = 0,
    context=None,
    initial: Optional[list] = None,
) -> CEResult:
    """Run cross-entropy iterations until the target event is reached and parameters settle.

    ``families`` holds one proposal family per independent variable (column of
    the sample matrix). ``event.score(x, ctx)`` returns a nonnegative distance
    to the target event; the relaxed event at level L is {score <= L}.
    ``context`` optionally supplies untilted side variables (drawn from their
    real law, so they carry no likelihood ratio).
    """
    rng = np.random.default_rng(seed)
    proposals = list(initial) if initial is not None else [f.initial() for f in families]
    level = math.inf
    states: list[CEState] = []
    stable = 0
    thresholds_of = getattr(event, "thresholds", None)
    for t in range(1, config.max_iter + 1):
        n = config.n_samples
        warnings: list[str] = []
        x, logw, ctx = _draw(families, proposals, rng, n, context)
        scores = event.score(x, ctx)
        lvl = schedule.next_level(scores, level, t)
        hit = scores <= lvl

        shifts = 0
        while hit.sum() < config.min_hits and shifts < config.max_shifts:
            movable = [
                v for v, f in enumerate(families)
                if config.step_for(v) > 0 and f.tail_at_max(proposals[v], config.pi_floor)
            ]
            if not movable:
                break
            for v in movable:
                proposals[v] = families[v].shift(proposals[v], config.step_for(v))
            shifts += 1
            x, logw, ctx = _draw(families, proposals, rng, n, context)
            scores = event.score(x, ctx)
            lvl = schedule.next_level(scores, level, t)
            hit = scores <= lvl
        if shifts:
            log.info("iteration %d: shifted truncations %d time(s), %d hits", t, shifts, int(hit.sum()))

        while True:
            counts = [
                np.bincount(f.piece_index(p, x[hit, v]), minlength=len(f.piece_weights(p)))
                for v, (f, p) in enumerate(zip(families, proposals))
            ]
            weights = [f.piece_weights(p) for f, p in zip(families, proposals)]
            new_n, warn = adjust_sample_size(counts, weights, n, config)
            if warn:
                warnings.append(warn)
            if new_n <= n:
                break
            x2, logw2, ctx2 = _draw(families, proposals, rng, new_n - n, context)
            x = np.vstack([x, x2])
            logw = np.concatenate([logw, logw2])
            ctx = _concat_ctx(ctx, ctx2)
            n = new_n
            scores = event.score(x, ctx)
            lvl = schedule.next_level(scores, level, t)
            hit = scores <= lvl

        c = np.where(hit, np.exp(logw), 0.0)
        if not (c > 0).any():
            raise CEError(
                f"iteration {t}: no rare events at level {lvl:g} after {shifts} shift(s) with n={n}", states
            )
        if hit.sum() < config.min_hits:
            warnings.append(f"only {int(hit.sum())} hits; update is low-confidence")

        updated, fallback = [], []
        for v, (f, p) in enumerate(zip(families, proposals)):
            new, diag = f.update(p, x[:, v], c, config, first=(t == 1))
            updated.append(new)
            fallback.append(diag["fallback_pieces"])
        change = max(
            float(np.max(np.abs(f.params(a) - f.params(b)))) if f.params(a).shape == f.params(b).shape else math.inf
            for f, a, b in zip(families, updated, proposals)
        )
        state = CEState(
            iteration=t,
            level=lvl,
            thresholds=thresholds_of(lvl) if thresholds_of else None,
            n=n,
            hits=int(hit.sum()),
            samples=x,
            weights=c,
            sampling=list(proposals),
            updated=updated,
            change=change,
            shifts=shifts,
            warnings=warnings,
            fallback=fallback,
        )
        states.append(state)
        log.debug("CE iteration %d level=%g n=%d hits=%d change=%.3g", t, lvl, n, state.hits, change)
        proposals = updated
        level = lvl
        if level == 0.0:
            stable = stable + 1 if change < config.tol else 0
            if stable >= config.patience:
                return CEResult(states, proposals, True, list(families))
    if level > 0.0:
        raise CEError(f"target event not reached after {config.max_iter} iterations (level {level:g})", states)
    return CEResult(states, proposals, False, list(families))
