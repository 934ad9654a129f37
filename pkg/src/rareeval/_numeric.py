"""Shared numeric kernels: standard normal masses in log space and 1-D maximization.

Every Phi/phi evaluation in the package goes through this module so that
fitting, tilting and sampling agree to the last bit.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import optimize, special

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def norm_logpdf(z):
    return -0.5 * np.square(z) - LOG_SQRT_2PI


def norm_cdf(z):
    return special.ndtr(z)


def norm_ppf(p):
    return special.ndtri(p)


def normal_quantile(p: float) -> float:
    """Quantile of the standard normal, e.g. z_{alpha/2} = normal_quantile(1 - alpha/2)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


def log_norm_mass(a, b):
    """log(Phi(b) - Phi(a)) for a < b, stable in both tails.

    Works on arrays; infinite endpoints are allowed.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    # Upper tail: mirror so the subtraction happens between small survival values.
    upper = a > 0
    hi = np.where(upper, -a, b)
    lo = np.where(upper, -b, a)
    log_hi = special.log_ndtr(hi)
    log_lo = special.log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_hi + np.log1p(-np.exp(log_lo - log_hi))
    return out if out.ndim else float(out)


def norm_mass_ppf(a, b, u):
    """Inverse of the standard normal CDF restricted to [a, b).

    Returns z with (Phi(z) - Phi(a)) / (Phi(b) - Phi(a)) = u. Evaluated on the
    mirrored side when the interval sits in the upper tail.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    upper = a > 0
    # Mirrored problem: find w = -z in (-b, -a] with survival mass fraction u.
    lo = np.where(upper, -b, a)
    hi = np.where(upper, -a, b)
    frac = np.where(upper, 1.0 - u, u)
    with np.errstate(divide="ignore"):
        log_target = np.logaddexp(special.log_ndtr(lo), np.log(frac) + log_norm_mass(lo, hi))
    z = special.ndtri_exp(log_target)
    z = np.clip(z, lo, hi)
    out = np.where(upper, -z, z)
    return out if out.ndim else float(out)


def maximize_scalar(
    objective: Callable[[float], float],
    lo: float,
    hi: float,
    xtol: float = 1e-8,
    expand: float = 0.0,
    max_expansions: int = 20,
    hard_lo: float = -math.inf,
    hard_hi: float = math.inf,
) -> float:
    """Bracketed Brent maximization of a unimodal objective on [lo, hi].

    When ``expand`` > 0 and the optimum lands on a bracket end, that end is
    pushed outward by ``expand`` times the current width (never past
    ``hard_lo``/``hard_hi``) and the search is repeated.
    """
    lo = max(lo, hard_lo)
    hi = min(hi, hard_hi)

    def neg(x: float) -> float:
        v = objective(x)
        return math.inf if not math.isfinite(v) else -v

    for _ in range(max_expansions + 1):
        res = optimize.minimize_scalar(
            neg, bounds=(lo, hi), method="bounded", options={"xatol": xtol}
        )
        x = float(res.x)
        # The bounded Brent never evaluates the endpoints themselves.
        best_x, best_v = x, neg(x)
        for end in (lo, hi):
            v = neg(end)
            if v < best_v:
                best_x, best_v = end, v
        width = hi - lo
        at_lo = best_x - lo <= 10 * xtol + 1e-9 * width
        at_hi = hi - best_x <= 10 * xtol + 1e-9 * width
        if expand <= 0 or not (at_lo or at_hi):
            return best_x
        if at_lo and lo > hard_lo:
            lo = max(lo - expand * width, hard_lo)
        elif at_hi and hi < hard_hi:
            hi = min(hi + expand * width, hard_hi)
        else:
            return best_x
    return best_x
