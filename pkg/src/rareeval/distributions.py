"""Bounded component distributions and piecewise mixtures.

All distributions are frozen dataclasses. Densities are evaluated in log
space; ``pdf`` is ``exp(logpdf)``. Supports are half-open ``[lower, upper)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from rareeval._numeric import log_norm_mass, norm_cdf, norm_logpdf, norm_mass_ppf

INF = math.inf


def _scalar_or_array(out, like):
    if np.ndim(like) == 0:
        return float(out)
    return out


def _check_bounds(lower: float, upper: float) -> None:
    if math.isnan(lower) or math.isnan(upper) or not upper > lower:
        raise ValueError(f"invalid bounds [{lower}, {upper})")


@dataclass(frozen=True)
class BoundedExponential:
    """Exponential law with the given rate, conditioned on [lower, upper)."""

    rate: float
    lower: float = 0.0
    upper: float = INF

    kind = "bounded_exp"

    def __post_init__(self):
        _check_bounds(self.lower, self.upper)
        if not math.isfinite(self.lower):
            raise ValueError("bounded exponential needs a finite lower bound")
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"rate must be positive and finite, got {self.rate}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def log_normalizer(self) -> float:
        """log(1 - exp(-rate * width)), the conditional mass relative to the lower bound."""
        return math.log(-math.expm1(-self.rate * self.width))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lower) & (x < self.upper)
        with np.errstate(invalid="ignore", over="ignore"):
            val = math.log(self.rate) - self.rate * (x - self.lower) - self.log_normalizer()
        return _scalar_or_array(np.where(inside, val, -INF), x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            inner = np.expm1(-self.rate * (np.clip(x, self.lower, None) - self.lower))
            val = inner / math.expm1(-self.rate * self.width)
        out = np.where(x < self.lower, 0.0, np.where(x >= self.upper, 1.0, val))
        return _scalar_or_array(out, x)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        x = self.lower - np.log1p(u * math.expm1(-self.rate * self.width)) / self.rate
        x = np.clip(x, self.lower, self.upper)
        return _scalar_or_array(x, u)

    def mean(self) -> float:
        lam, w = self.rate, self.width
        if math.isinf(w):
            return self.lower + 1.0 / lam
        return self.lower + 1.0 / lam - w * math.exp(-lam * w) / (-math.expm1(-lam * w))

    def rebound(self, lower: float, upper: float) -> "BoundedExponential":
        return replace(self, lower=lower, upper=upper)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class BoundedNormal:
    """Normal law N(mu, sigma^2) conditioned on [lower, upper). Untilted pieces have mu = 0."""

    sigma: float
    mu: float = 0.0
    lower: float = -INF
    upper: float = INF

    kind = "bounded_normal"

    def __post_init__(self):
        _check_bounds(self.lower, self.upper)
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")

    @property
    def alpha(self) -> float:
        return (self.lower - self.mu) / self.sigma

    @property
    def beta(self) -> float:
        return (self.upper - self.mu) / self.sigma

    def log_normalizer(self) -> float:
        """log(Phi(beta) - Phi(alpha))."""
        return log_norm_mass(self.alpha, self.beta)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lower) & (x < self.upper)
        with np.errstate(invalid="ignore"):
            val = norm_logpdf((x - self.mu) / self.sigma) - math.log(self.sigma) - self.log_normalizer()
        return _scalar_or_array(np.where(inside, val, -INF), x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (np.clip(x, self.lower, self.upper) - self.mu) / self.sigma
        with np.errstate(divide="ignore"):
            val = np.exp(log_norm_mass(self.alpha, np.maximum(z, self.alpha)) - self.log_normalizer())
        val = np.where(z <= self.alpha, 0.0, val)
        out = np.where(x < self.lower, 0.0, np.where(x >= self.upper, 1.0, val))
        return _scalar_or_array(np.clip(out, 0.0, 1.0), x)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        z = norm_mass_ppf(self.alpha, self.beta, u)
        x = np.clip(self.mu + self.sigma * np.asarray(z), self.lower, self.upper)
        return _scalar_or_array(x, u)

    def rebound(self, lower: float, upper: float) -> "BoundedNormal":
        return replace(self, lower=lower, upper=upper)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "sigma": self.sigma}
        if self.mu != 0.0:
            d["mu"] = self.mu
        return d


@dataclass(frozen=True)
class BoundedNormalMixture:
    """Mixture of bounded normals sharing the support [lower, upper)."""

    weights: tuple
    sigmas: tuple
    lower: float = -INF
    upper: float = INF
    means: tuple = None

    kind = "bounded_normal_mixture"

    def __post_init__(self):
        _check_bounds(self.lower, self.upper)
        w = tuple(float(p) for p in self.weights)
        s = tuple(float(v) for v in self.sigmas)
        m = tuple(0.0 for _ in s) if self.means is None else tuple(float(v) for v in self.means)
        if not (len(w) == len(s) == len(m) >= 1):
            raise ValueError("weights, sigmas and means must have equal nonzero length")
        if any(not 0.0 <= p <= 1.0 for p in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must lie in [0, 1] and sum to 1, got {w}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "means", m)
        # Validates every component.
        object.__setattr__(self, "_components", tuple(self.components()))

    def components(self) -> list[BoundedNormal]:
        return [
            BoundedNormal(sigma=s, mu=m, lower=self.lower, upper=self.upper)
            for s, m in zip(self.sigmas, self.means)
        ]

    @property
    def m(self) -> int:
        return len(self.weights)

    def component_logpdfs(self, x) -> np.ndarray:
        """Array of shape (m, n) with log(p_j f_j(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            logw = np.log(np.asarray(self.weights))
        return np.stack([lw + c.logpdf(x) for lw, c in zip(logw, self._components)])

    def logpdf(self, x):
        xa = np.asarray(x, dtype=float)
        out = logsumexp(self.component_logpdfs(xa), axis=0)
        return _scalar_or_array(out.reshape(xa.shape) if xa.ndim else out[0], xa)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        xa = np.asarray(x, dtype=float)
        out = sum(p * np.asarray(c.cdf(xa)) for p, c in zip(self.weights, self._components))
        return _scalar_or_array(np.clip(out, 0.0, 1.0), xa)

    def ppf(self, u, iterations: int = 100):
        """Numerical inverse CDF: Newton steps safeguarded by bisection inside the component-quantile bracket."""
        ua = np.asarray(u, dtype=float)
        flat = np.atleast_1d(ua).ravel()
        live = [c for p, c in zip(self.weights, self._components) if p > 0]
        qs = np.stack([np.asarray(c.ppf(flat), dtype=float).reshape(-1) for c in live])
        lo = qs.min(axis=0)
        hi = qs.max(axis=0)
        x = 0.5 * (lo + hi)
        todo = np.flatnonzero(hi > lo)
        for _ in range(iterations):
            if todo.size == 0:
                break
            xt, ut = x[todo], flat[todo]
            f = np.asarray(self.cdf(xt)).reshape(-1) - ut
            below = f < 0
            lo[todo] = np.where(below, xt, lo[todo])
            hi[todo] = np.where(below, hi[todo], xt)
            dens = np.asarray(self.pdf(xt)).reshape(-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = xt - f / dens
            mid = 0.5 * (lo[todo] + hi[todo])
            ok = np.isfinite(step) & (step > lo[todo]) & (step < hi[todo])
            nxt = np.where(ok, step, mid)
            done = (f == 0) | (np.abs(nxt - xt) <= 4e-16 * np.maximum(1.0, np.abs(xt))) | (
                hi[todo] - lo[todo] <= 4e-16 * np.maximum(1.0, np.abs(hi[todo]))
            )
            x[todo] = np.where(f == 0, xt, nxt)
            todo = todo[~done]
        return _scalar_or_array(x.reshape(ua.shape) if ua.ndim else x[0], ua)

    def rebound(self, lower: float, upper: float) -> "BoundedNormalMixture":
        return replace(self, lower=lower, upper=upper)

    def to_dict(self) -> dict:
        comps = []
        for p, s, m in zip(self.weights, self.sigmas, self.means):
            c = {"p": p, "sigma": s}
            if m != 0.0:
                c["mu"] = m
            comps.append(c)
        return {"kind": self.kind, "components": comps}


BoundedComponent = Union[BoundedExponential, BoundedNormal, BoundedNormalMixture]


def mixture_pdf(c: BoundedNormalMixture, x):
    """Density of a bounded-normal mixture; each component renormalized on the shared bounds."""
    return c.pdf(x)


@dataclass(frozen=True)
class PiecewiseMixture:
    """k-piece truncated mixture: piece i lives on [truncations[i-1], truncations[i]) with weight weights[i-1]."""

    truncations: tuple
    weights: tuple
    pieces: tuple

    def __post_init__(self):
        t = tuple(float(v) for v in self.truncations)
        w = tuple(float(v) for v in self.weights)
        p = tuple(self.pieces)
        k = len(p)
        if k < 1 or len(t) != k + 1 or len(w) != k:
            raise ValueError("need k pieces, k weights and k + 1 truncation points")
        if any(not b > a for a, b in zip(t, t[1:])):
            raise ValueError(f"truncations must be strictly increasing, got {t}")
        if any(not 0.0 <= v <= 1.0 for v in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights must lie in [0, 1] and sum to 1, got {w}")
        for i, piece in enumerate(p):
            if piece.lower != t[i] or piece.upper != t[i + 1]:
                raise ValueError(
                    f"piece {i} bounds [{piece.lower}, {piece.upper}) do not match "
                    f"truncations [{t[i]}, {t[i + 1]})"
                )
        object.__setattr__(self, "truncations", t)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "pieces", p)
        cum = np.concatenate([[0.0], np.cumsum(w)])
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_pieces(cls, weights: Sequence[float], pieces: Sequence[BoundedComponent]) -> "PiecewiseMixture":
        truncations = [pieces[0].lower] + [pc.upper for pc in pieces]
        return cls(tuple(truncations), tuple(weights), tuple(pieces))

    @property
    def k(self) -> int:
        return len(self.pieces)

    @property
    def lower(self) -> float:
        return self.truncations[0]

    @property
    def upper(self) -> float:
        return self.truncations[-1]

    def piece_index(self, x) -> np.ndarray:
        """Index of the piece containing each x, or -1 outside [lower, upper)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.searchsorted(np.asarray(self.truncations), x, side="right") - 1
        idx[(x < self.lower) | (x >= self.upper) | np.isnan(x)] = -1
        return idx

    def logpdf(self, x):
        xa = np.asarray(x, dtype=float)
        flat = np.atleast_1d(xa).ravel()
        idx = self.piece_index(flat)
        out = np.full(flat.shape, -INF)
        for i, (w, piece) in enumerate(zip(self.weights, self.pieces)):
            sel = idx == i
            if w > 0 and sel.any():
                out[sel] = math.log(w) + np.asarray(piece.logpdf(flat[sel]))
        return _scalar_or_array(out.reshape(xa.shape) if xa.ndim else out[0], xa)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        xa = np.asarray(x, dtype=float)
        flat = np.atleast_1d(xa).ravel()
        idx = self.piece_index(flat)
        out = np.where(flat >= self.upper, 1.0, 0.0)
        for i, (w, piece) in enumerate(zip(self.weights, self.pieces)):
            sel = idx == i
            if sel.any():
                out[sel] = self._cum[i] + w * np.asarray(piece.cdf(flat[sel]))
        out = np.clip(out, 0.0, 1.0)
        return _scalar_or_array(out.reshape(xa.shape) if xa.ndim else out[0], xa)

    def ppf(self, y):
        """Inverse CDF on [0, 1); zero-weight pieces are never selected."""
        ya = np.asarray(y, dtype=float)
        flat = np.atleast_1d(ya).ravel()
        if np.any((flat < 0.0) | (flat >= 1.0) | np.isnan(flat)):
            raise ValueError("inverse_cdf is defined for y in [0, 1)")
        live = [i for i, w in enumerate(self.weights) if w > 0]
        idx = np.searchsorted(self._cum[1:], flat, side="right")
        # Rounding in the cumulative sum may leave y just above the last edge.
        idx = np.minimum(idx, live[-1])
        out = np.empty(flat.shape)
        for i in set(idx.tolist()):
            sel = idx == i
            local = (flat[sel] - self._cum[i]) / self.weights[i]
            local = np.clip(local, 0.0, np.nextafter(1.0, 0.0))
            out[sel] = np.asarray(self.pieces[i].ppf(local)).reshape(-1)
        return _scalar_or_array(out.reshape(ya.shape) if ya.ndim else out[0], ya)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.ppf(rng.random(n)), dtype=float).reshape(n)

    def to_dict(self) -> dict:
        return {
            "truncations": [encode_float(v) for v in self.truncations],
            "weights": list(self.weights),
            "pieces": [pc.to_dict() for pc in self.pieces],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PiecewiseMixture":
        t = [decode_float(v) for v in doc["truncations"]]
        pieces = [piece_from_dict(d, t[i], t[i + 1]) for i, d in enumerate(doc["pieces"])]
        return cls(tuple(t), tuple(float(w) for w in doc["weights"]), tuple(pieces))


def pdf(d: PiecewiseMixture, x):
    return d.pdf(x)


def cdf(d: PiecewiseMixture, x):
    return d.cdf(x)


def inverse_cdf(d: PiecewiseMixture, y):
    return d.ppf(y)


def sample(d, rng: np.random.Generator, n: int) -> np.ndarray:
    """n inverse-CDF draws from a piecewise mixture or an empirical distribution."""
    return d.sample(rng, n)


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Discrete law over observed support values with multiplicities."""

    values: tuple
    counts: tuple = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        c = np.ones(v.shape, dtype=np.int64) if self.counts is None else np.asarray(self.counts, dtype=np.int64)
        if v.ndim != 1 or v.size == 0 or c.shape != v.shape:
            raise ValueError("values and counts must be matching nonempty 1-D sequences")
        if np.any(c < 0) or c.sum() == 0 or not np.all(np.isfinite(v)):
            raise ValueError("counts must be nonnegative with positive total; values finite")
        order = np.argsort(v, kind="stable")
        v, c = v[order], c[order]
        # Merge duplicate support points.
        uniq, inv = np.unique(v, return_inverse=True)
        merged = np.bincount(inv, weights=c).astype(np.int64)
        keep = merged > 0
        object.__setattr__(self, "values", tuple(uniq[keep].tolist()))
        object.__setattr__(self, "counts", tuple(merged[keep].tolist()))
        cum = np.cumsum(merged[keep]) / merged[keep].sum()
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_observations(cls, observations) -> "EmpiricalDistribution":
        uniq, counts = np.unique(np.asarray(observations, dtype=float), return_counts=True)
        return cls(tuple(uniq.tolist()), tuple(counts.tolist()))

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def probabilities(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.total

    def mass(self, lower: float, upper: float) -> float:
        v = np.asarray(self.values)
        sel = (v >= lower) & (v < upper)
        return float(np.asarray(self.counts)[sel].sum() / self.total)

    def restrict(self, lower: float, upper: float) -> "EmpiricalDistribution":
        v = np.asarray(self.values)
        sel = (v >= lower) & (v < upper)
        if not sel.any():
            raise ValueError(f"no support in [{lower}, {upper})")
        return EmpiricalDistribution(tuple(v[sel].tolist()), tuple(np.asarray(self.counts)[sel].tolist()))

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self._cum, u, side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return np.asarray(self.values)[idx]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.ppf(rng.random(n))

    def to_dict(self) -> dict:
        return {"values": list(self.values), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, doc: dict) -> "EmpiricalDistribution":
        return cls(tuple(doc["values"]), tuple(doc["counts"]))


def encode_float(v: float):
    if v == INF:
        return "+inf"
    if v == -INF:
        return "-inf"
    return v


def decode_float(v) -> float:
    if isinstance(v, str):
        if v in ("+inf", "inf"):
            return INF
        if v == "-inf":
            return -INF
        raise ValueError(f"unknown float token {v!r}")
    return float(v)


def piece_from_dict(doc: dict, lower: float, upper: float) -> BoundedComponent:
    kind = doc["kind"]
    if kind == "bounded_exp":
        return BoundedExponential(rate=float(doc["rate"]), lower=lower, upper=upper)
    if kind == "bounded_normal":
        return BoundedNormal(sigma=float(doc["sigma"]), mu=float(doc.get("mu", 0.0)), lower=lower, upper=upper)
    if kind == "bounded_normal_mixture":
        comps = doc["components"]
        return BoundedNormalMixture(
            weights=tuple(float(c["p"]) for c in comps),
            sigmas=tuple(float(c["sigma"]) for c in comps),
            means=tuple(float(c.get("mu", 0.0)) for c in comps),
            lower=lower,
            upper=upper,
        )
    raise ValueError(f"unknown piece kind {kind!r}")
