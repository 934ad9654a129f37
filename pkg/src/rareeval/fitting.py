"""Maximum-likelihood fitting of bounded pieces and piecewise mixtures.

Bounded exponential and bounded normal fits reduce to 1-D maximizations over
sufficient statistics; the bounded-normal mixture is fit with EM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from rareeval._numeric import log_norm_mass, maximize_scalar
from rareeval.distributions import (
    INF,
    BoundedExponential,
    BoundedNormal,
    BoundedNormalMixture,
    PiecewiseMixture,
)

FAMILIES = ("exp", "normal", "normal_mixture")


class FitError(ValueError):
    """Data cannot support the requested fit."""


@dataclass(frozen=True)
class Dataset:
    """Observations of one variable, optionally tagged with a segment label."""

    values: np.ndarray
    segment: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise FitError("dataset is empty")
        if not np.all(np.isfinite(v)):
            raise FitError(f"dataset holds a non-finite observation: {v[~np.isfinite(v)][0]!r}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class EMConfig:
    m: int = 2
    max_iter: int = 500
    tol: float = 1e-6
    init_sigmas: Optional[tuple] = None
    init_weights: Optional[tuple] = None
    xtol: float = 1e-8

    def __post_init__(self):
        if self.m < 1 or self.max_iter < 1 or not self.tol > 0:
            raise ValueError("EM needs m >= 1, max_iter >= 1 and tol > 0")


@dataclass(frozen=True)
class FitConfig:
    """Interior knots gamma_1..gamma_{k-1}, one family per piece, outer bounds and EM settings."""

    knots: tuple
    families: tuple
    lower: float = 0.0
    upper: float = INF
    em: EMConfig = field(default_factory=EMConfig)
    xtol: float = 1e-8

    def __post_init__(self):
        knots = tuple(float(v) for v in self.knots)
        fams = tuple(self.families)
        t = (self.lower, *knots, self.upper)
        if any(not b > a for a, b in zip(t, t[1:])):
            raise ValueError(f"truncations must be strictly increasing, got {t}")
        if len(fams) != len(knots) + 1:
            raise ValueError(f"need {len(knots) + 1} families, got {len(fams)}")
        bad = [f for f in fams if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown family {bad[0]!r}; choose from {FAMILIES}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "families", fams)

    @property
    def truncations(self) -> tuple:
        return (self.lower, *self.knots, self.upper)


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float).reshape(-1)


def _require_inside(x: np.ndarray, lower: float, upper: float) -> None:
    bad = (x < lower) | (x >= upper) | np.isnan(x)
    if bad.any():
        raise FitError(f"observation {x[bad][0]!r} lies outside [{lower}, {upper})")


def log_likelihood(d: PiecewiseMixture, data) -> float:
    """Total log-likelihood; errors on observations outside the support or in zero-weight pieces."""
    x = _values(data)
    _require_inside(x, d.lower, d.upper)
    lp = np.asarray(d.logpdf(x), dtype=float).reshape(-1)
    if np.isneginf(lp).any():
        raise FitError(f"observation {x[np.isneginf(lp)][0]!r} falls in a zero-weight piece")
    return math.fsum(lp.tolist())


def fit_piece_weights(data, truncations: Sequence[float]) -> tuple:
    """pi_i = |S_i| / N."""
    x = _values(data)
    t = np.asarray(truncations, dtype=float)
    _require_inside(x, t[0], t[-1])
    idx = np.searchsorted(t, x, side="right") - 1
    counts = np.bincount(idx, minlength=len(t) - 1)
    return tuple((counts / x.size).tolist())


# -- bounded exponential ---------------------------------------------------


def bounded_exponential_objective(rate: float, data, lower: float, upper: float, weights=None) -> float:
    """N ln(rate) - N ln(e^{-rate lower} - e^{-rate upper}) - rate * sum(X), written relative to the lower bound."""
    x = _values(data)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    return _exp_objective(rate, float(w.sum()), float(np.dot(w, x - lower)), upper - lower)


def _exp_objective(rate: float, n: float, excess: float, width: float) -> float:
    if not rate > 0:
        return -INF
    return n * math.log(rate) - rate * excess - n * math.log(-math.expm1(-rate * width))


def weighted_exponential_rate(n: float, excess: float, width: float, xtol: float = 1e-8) -> float:
    """Rate maximizing the (weighted) bounded-exponential log-likelihood from its sufficient statistics."""
    if not n > 0:
        raise FitError("no mass to fit")
    if not excess > 0:
        raise FitError("degenerate data: every observation sits on the lower bound")
    guess = n / excess
    if math.isinf(width):
        return guess
    # Mean excess at or beyond width / 2 pushes the optimum to the uniform limit.
    hard_lo, hard_hi = math.log(1e-10 / width), math.log(1e10 / width)
    log_rate = maximize_scalar(
        lambda lr: _exp_objective(math.exp(lr), n, excess, width),
        math.log(guess) - 3.0,
        math.log(guess) + 3.0,
        xtol=xtol,
        expand=1.0,
        hard_lo=hard_lo,
        hard_hi=hard_hi,
    )
    return math.exp(log_rate)


def fit_bounded_exponential(data, lower: float, upper: float, weights=None, xtol: float = 1e-8) -> BoundedExponential:
    x = _values(data)
    if x.size == 0:
        raise FitError("cannot fit an empty piece")
    _require_inside(x, lower, upper)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    rate = weighted_exponential_rate(float(w.sum()), float(np.dot(w, x - lower)), upper - lower, xtol)
    return BoundedExponential(rate=rate, lower=lower, upper=upper)


# -- bounded normal ----------------------------------------------------------


def bounded_normal_objective(sigma: float, data, lower: float, upper: float, weights=None) -> float:
    """-sum(X^2)/(2 sigma^2) - N ln(sigma) - N ln(Phi(upper/sigma) - Phi(lower/sigma))."""
    x = _values(data)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    return _normal_objective(sigma, float(w.sum()), float(np.dot(w, x * x)), lower, upper)


def _normal_objective(sigma: float, n: float, sum_sq: float, lower: float, upper: float) -> float:
    if not sigma > 0:
        return -INF
    return -sum_sq / (2.0 * sigma * sigma) - n * math.log(sigma) - n * log_norm_mass(lower / sigma, upper / sigma)


def weighted_normal_scale(n: float, sum_sq: float, lower: float, upper: float, xtol: float = 1e-8) -> float:
    if not n > 0:
        raise FitError("no mass to fit")
    if not sum_sq > 0:
        raise FitError("degenerate data: all observations are zero")
    guess = math.sqrt(sum_sq / n)
    if math.isinf(lower) and math.isinf(upper):
        return guess
    log_sigma = maximize_scalar(
        lambda ls: _normal_objective(math.exp(ls), n, sum_sq, lower, upper),
        math.log(guess) - 3.0,
        math.log(guess) + 3.0,
        xtol=xtol,
        expand=1.0,
        hard_lo=math.log(guess) - 40.0,
        hard_hi=math.log(guess) + 40.0,
    )
    return math.exp(log_sigma)


def fit_bounded_normal(data, lower: float, upper: float, weights=None, xtol: float = 1e-8) -> BoundedNormal:
    x = _values(data)
    if x.size == 0:
        raise FitError("cannot fit an empty piece")
    _require_inside(x, lower, upper)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    sigma = weighted_normal_scale(float(w.sum()), float(np.dot(w, x * x)), lower, upper, xtol)
    return BoundedNormal(sigma=sigma, lower=lower, upper=upper)


# -- EM for bounded-normal mixtures -----------------------------------------


@dataclass
class EMState:
    responsibilities: np.ndarray  # shape (N, m); rows sum to 1
    weights: np.ndarray
    sigmas: np.ndarray
    log_likelihood: float


@dataclass
class EMResult:
    mixture: BoundedNormalMixture
    log_likelihoods: list
    iterations: int
    converged: bool


def initial_sigmas(x: np.ndarray, m: int) -> np.ndarray:
    """Root-mean-square scale spread over a geometric ladder of factors 2^(j - (m-1)/2)."""
    rms = math.sqrt(float(np.mean(x * x)))
    return rms * 2.0 ** (np.arange(m) - (m - 1) / 2.0)


def e_step(x: np.ndarray, weights, sigmas, lower: float, upper: float) -> EMState:
    mix = BoundedNormalMixture(tuple(weights), tuple(sigmas), lower, upper)
    logp = mix.component_logpdfs(x)
    ll = logsumexp(logp, axis=0)
    tau = np.exp(logp - ll).T
    tau /= tau.sum(axis=1, keepdims=True)
    return EMState(tau, np.asarray(weights, float), np.asarray(sigmas, float), math.fsum(ll.tolist()))


def run_em(data, lower: float, upper: float, config: EMConfig = EMConfig()) -> EMResult:
    x = _values(data)
    if x.size == 0:
        raise FitError("cannot fit an empty piece")
    _require_inside(x, lower, upper)
    m = config.m
    sigmas = np.asarray(config.init_sigmas if config.init_sigmas is not None else initial_sigmas(x, m), float)
    weights = np.asarray(config.init_weights if config.init_weights is not None else np.full(m, 1.0 / m), float)
    weights = weights / weights.sum()
    if sigmas.shape != (m,) or weights.shape != (m,):
        raise ValueError("initial parameters must have one entry per component")

    state = e_step(x, weights, sigmas, lower, upper)
    history = [state.log_likelihood]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        tau = state.responsibilities
        mass = tau.sum(axis=0)
        for j in np.flatnonzero(mass < 1e-12):
            raise FitError(f"component {j} lost all responsibility mass")
        new_w = mass / x.size
        new_w = new_w / new_w.sum()
        sum_sq = tau.T @ (x * x)
        new_s = sigmas.copy()
        for j in range(m):
            cand = weighted_normal_scale(mass[j], sum_sq[j], lower, upper, config.xtol)
            # Keep the M-step a non-decreasing move even when the optimizer stops short.
            if _normal_objective(cand, mass[j], sum_sq[j], lower, upper) >= _normal_objective(
                sigmas[j], mass[j], sum_sq[j], lower, upper
            ):
                new_s[j] = cand
            if new_s[j] < 1e-8:
                raise FitError(f"component {j} collapsed (sigma={new_s[j]:.3g})")
        weights, sigmas = new_w, new_s
        new_state = e_step(x, weights, sigmas, lower, upper)
        gain = new_state.log_likelihood - state.log_likelihood
        if gain < -1e-9:
            raise FitError(f"EM log-likelihood decreased by {-gain:.3g} at iteration {it}")
        history.append(new_state.log_likelihood)
        state = new_state
        if gain < config.tol:
            converged = True
            break
    mixture = BoundedNormalMixture(tuple(weights.tolist()), tuple(sigmas.tolist()), lower, upper)
    return EMResult(mixture, history, it, converged)


def fit_mixture_em(data, lower: float, upper: float, config: EMConfig = EMConfig()) -> BoundedNormalMixture:
    return run_em(data, lower, upper, config).mixture


# -- piecewise ---------------------------------------------------------------


@dataclass
class PiecewiseFit:
    model: PiecewiseMixture
    log_likelihood: float
    pieces: list  # one report dict per piece


def _placeholder(family: str, lower: float, upper: float, m: int):
    scale = 1.0 if math.isinf(upper) else (upper - lower)
    if family == "exp":
        return BoundedExponential(rate=1.0 / scale, lower=lower, upper=upper)
    if family == "normal":
        return BoundedNormal(sigma=scale, lower=lower, upper=upper)
    sig = tuple((scale * 2.0 ** (np.arange(m) - (m - 1) / 2.0)).tolist())
    return BoundedNormalMixture(tuple([1.0 / m] * m), sig, lower, upper)


def fit_piecewise_report(data, config: FitConfig) -> PiecewiseFit:
    x = _values(data)
    t = config.truncations
    weights = fit_piece_weights(x, t)
    idx = np.searchsorted(np.asarray(t), x, side="right") - 1
    pieces, reports = [], []
    for i, fam in enumerate(config.families):
        lo, hi = t[i], t[i + 1]
        xi = x[idx == i]
        rep = {"piece": i, "family": fam, "lower": lo, "upper": hi, "count": int(xi.size), "weight": weights[i]}
        if xi.size == 0:
            piece = _placeholder(fam, lo, hi, config.em.m)
            rep["skipped"] = True
        elif fam == "exp":
            piece = fit_bounded_exponential(xi, lo, hi, xtol=config.xtol)
            rep["rate"] = piece.rate
        elif fam == "normal":
            piece = fit_bounded_normal(xi, lo, hi, xtol=config.xtol)
            rep["sigma"] = piece.sigma
        else:
            res = run_em(xi, lo, hi, config.em)
            piece = res.mixture
            rep.update(
                p=list(piece.weights),
                sigma=list(piece.sigmas),
                em_iterations=res.iterations,
                em_converged=res.converged,
            )
        if xi.size:
            rep["log_likelihood"] = math.fsum(np.asarray(piece.logpdf(xi)).tolist()) + xi.size * math.log(weights[i])
        pieces.append(piece)
        reports.append(rep)
    model = PiecewiseMixture(t, weights, tuple(pieces))
    return PiecewiseFit(model, log_likelihood(model, x), reports)


def fit_piecewise(data, config: FitConfig) -> PiecewiseMixture:
    return fit_piecewise_report(data, config).model


def quantile_knots(data, levels: Sequence[float] = (0.9, 0.99)) -> tuple:
    """Heuristic knots at empirical quantiles; a starting point, not a fitted quantity."""
    q = np.quantile(_values(data), levels)
    return tuple(sorted(set(float(v) for v in q)))
