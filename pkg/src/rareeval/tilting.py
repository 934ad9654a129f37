"""Exponential change of measure for bounded pieces and the piecewise proposal family."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from rareeval.distributions import (
    BoundedComponent,
    BoundedExponential,
    BoundedNormal,
    BoundedNormalMixture,
    PiecewiseMixture,
    decode_float,
    encode_float,
)

THETA_MARGIN = 1e-9


class SupportMismatchError(ValueError):
    """The proposal puts zero density where the base distribution does not."""


def tilt_exponential_piece(p: BoundedExponential, theta: float) -> BoundedExponential:
    if theta > p.rate - THETA_MARGIN:
        raise ValueError(f"tilt {theta} must stay below rate {p.rate} (normalizer diverges)")
    if theta == 0.0:
        return p
    return replace(p, rate=p.rate - theta)


def tilt_normal_piece(p: BoundedNormal, theta: float) -> BoundedNormal:
    if not math.isfinite(theta):
        raise ValueError("tilt must be finite")
    if theta == 0.0:
        return p
    return replace(p, mu=p.mu + theta * p.sigma**2)


def _normal_log_mgf(c: BoundedNormal, theta: float) -> float:
    shifted = tilt_normal_piece(c, theta)
    return theta * c.mu + 0.5 * (theta * c.sigma) ** 2 + shifted.log_normalizer() - c.log_normalizer()


def tilt_mixture_piece(p: BoundedNormalMixture, theta: float) -> BoundedNormalMixture:
    """Tilt every component by the same theta and reweight by p_j * MGF_j(theta)."""
    if theta == 0.0:
        return p
    comps = p.components()
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(p.weights)) + np.array([_normal_log_mgf(c, theta) for c in comps])
    w = np.exp(logw - logw.max())
    w = w / w.sum()
    means = tuple(c.mu + theta * c.sigma**2 for c in comps)
    return replace(p, weights=tuple(w.tolist()), means=means)


def tilt_piece(p: BoundedComponent, theta: float) -> BoundedComponent:
    if isinstance(p, BoundedExponential):
        return tilt_exponential_piece(p, theta)
    if isinstance(p, BoundedNormal):
        return tilt_normal_piece(p, theta)
    if isinstance(p, BoundedNormalMixture):
        return tilt_mixture_piece(p, theta)
    raise TypeError(f"cannot tilt {type(p).__name__}")


def log_mgf(p: BoundedComponent, theta: float) -> float:
    """kappa(theta) = log E[exp(theta X)] under the bounded piece."""
    if isinstance(p, BoundedExponential):
        t = tilt_exponential_piece(p, theta)
        # (rate / (rate - theta)) * mass ratio, written relative to the lower bound.
        return theta * p.lower + math.log(p.rate / t.rate) + t.log_normalizer() - p.log_normalizer()
    if isinstance(p, BoundedNormal):
        return _normal_log_mgf(p, theta)
    if isinstance(p, BoundedNormalMixture):
        with np.errstate(divide="ignore"):
            terms = np.log(np.asarray(p.weights)) + np.array([_normal_log_mgf(c, theta) for c in p.components()])
        top = terms.max()
        return float(top + math.log(np.exp(terms - top).sum()))
    raise TypeError(f"no log-MGF for {type(p).__name__}")


@dataclass(frozen=True)
class TiltedPiecewise:
    """Importance-sampling proposal over a base piecewise mixture.

    Piece i is the base piece exponentially tilted by ``thetas[i]`` and
    weighted by ``proposal_weights[i]``. ``truncations`` defaults to the base
    grid; a shifted grid moves the pieces while keeping the family and tilt.
    """

    base: PiecewiseMixture
    thetas: tuple
    proposal_weights: tuple
    truncations: tuple = None

    def __post_init__(self):
        k = self.base.k
        th = tuple(float(v) for v in self.thetas)
        pw = tuple(float(v) for v in self.proposal_weights)
        if len(th) != k or len(pw) != k:
            raise ValueError("need one theta and one proposal weight per piece")
        t = self.base.truncations if self.truncations is None else tuple(float(v) for v in self.truncations)
        if len(t) != k + 1 or t[0] != self.base.truncations[0]:
            raise ValueError("proposal truncations must have k + 1 points and share the lower bound")
        pieces = []
        for i, piece in enumerate(self.base.pieces):
            if (piece.lower, piece.upper) != (t[i], t[i + 1]):
                piece = piece.rebound(t[i], t[i + 1])
            pieces.append(tilt_piece(piece, th[i]))
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "proposal_weights", pw)
        object.__setattr__(self, "truncations", t)
        object.__setattr__(self, "proposal", PiecewiseMixture(t, pw, tuple(pieces)))

    @classmethod
    def identity(cls, base: PiecewiseMixture) -> "TiltedPiecewise":
        return cls(base, tuple(0.0 for _ in range(base.k)), base.weights)

    @property
    def k(self) -> int:
        return self.base.k

    @property
    def shifted(self) -> bool:
        return self.truncations != self.base.truncations

    def logpdf(self, x):
        return self.proposal.logpdf(x)

    def pdf(self, x):
        return self.proposal.pdf(x)

    def cdf(self, x):
        return self.proposal.cdf(x)

    def ppf(self, y):
        return self.proposal.ppf(y)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.proposal.sample(rng, n)

    def piece_index(self, x) -> np.ndarray:
        return self.proposal.piece_index(x)

    def with_parameters(self, thetas, proposal_weights, truncations=None) -> "TiltedPiecewise":
        return TiltedPiecewise(self.base, tuple(thetas), tuple(proposal_weights), truncations or self.truncations)

    def to_dict(self) -> dict:
        doc = self.base.to_dict()
        doc["theta"] = list(self.thetas)
        doc["proposal_weights"] = list(self.proposal_weights)
        if self.shifted:
            doc["proposal_truncations"] = [encode_float(v) for v in self.truncations]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TiltedPiecewise":
        base = PiecewiseMixture.from_dict(doc)
        t = doc.get("proposal_truncations")
        return cls(
            base,
            tuple(float(v) for v in doc["theta"]),
            tuple(float(v) for v in doc["proposal_weights"]),
            None if t is None else tuple(decode_float(v) for v in t),
        )


def log_likelihood_ratio(base, proposal, x) -> np.ndarray:
    """log(base pdf / proposal pdf), vectorized. Raises when the proposal misses base support."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lb = np.asarray(base.logpdf(x), dtype=float).reshape(-1)
    lp = np.asarray(proposal.logpdf(x), dtype=float).reshape(-1)
    bad = np.isneginf(lp) & np.isfinite(lb)
    if bad.any():
        where = np.flatnonzero(bad)[0]
        raise SupportMismatchError(f"proposal density is zero at x={x[where]!r} where the base density is positive")
    with np.errstate(invalid="ignore"):
        out = np.where(np.isneginf(lb), -np.inf, lb - lp)
    return out


def _covered(intervals) -> list:
    """Merge [lo, hi) intervals into disjoint runs."""
    runs = []
    for lo, hi in sorted(intervals):
        if runs and lo <= runs[-1][1]:
            runs[-1][1] = max(runs[-1][1], hi)
        else:
            runs.append([lo, hi])
    return runs


def check_support(base, proposal) -> None:
    """Raise SupportMismatchError if a positive-weight base piece is not covered by the proposal.

    Sampling from the proposal never visits points where its density is zero,
    so the pointwise check in log_likelihood_ratio cannot catch a dropped
    piece; this catches it before any estimate is formed. Objects that know
    their own structure may provide ``check_support(base)``.
    """
    own = getattr(proposal, "check_support", None)
    if own is not None:
        own(base)
        return
    b = base.proposal if isinstance(base, TiltedPiecewise) else base
    q = proposal.proposal if isinstance(proposal, TiltedPiecewise) else proposal
    if not (hasattr(b, "truncations") and hasattr(q, "truncations")):
        return
    t = q.truncations
    runs = _covered((t[i], t[i + 1]) for i, w in enumerate(q.weights) if w > 0)
    bt = b.truncations
    for i, w in enumerate(b.weights):
        lo, hi = bt[i], bt[i + 1]
        if w > 0 and not any(r[0] <= lo and hi <= r[1] for r in runs):
            raise SupportMismatchError(f"proposal gives zero weight to part of the base piece [{lo}, {hi})")


def likelihood_ratio(base, proposal, x):
    out = np.exp(log_likelihood_ratio(base, proposal, x))
    return float(out[0]) if np.ndim(x) == 0 else out
