"""Crude and importance-sampling estimators with sequential relative-half-width stopping."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from rareeval._numeric import normal_quantile
from rareeval.tilting import check_support, log_likelihood_ratio

TRACE_HEADER = ("n", "estimate", "ci_lo", "ci_hi", "rel_half_width")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StoppingRule:
    """Stop once the 100(1-alpha)% CI half-width drops below beta * estimate."""

    alpha: float = 0.2
    beta: float = 0.2
    min_samples: int = 100
    max_samples: int = 1_000_000
    batch_size: int = 100
    min_hits: int = 5

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.batch_size < 1 or self.min_samples < 1 or self.max_samples < self.min_samples:
            raise ValueError("need batch_size >= 1 and min_samples <= max_samples")

    @property
    def z(self) -> float:
        return normal_quantile(1.0 - self.alpha / 2.0)


@dataclass
class EstimateReport:
    estimate: float
    n: int
    variance: float  # sample variance of the (weighted) indicator
    confidence: float
    ci: tuple
    rel_half_width: float
    method: str
    hits: int
    converged: bool
    seed: int
    workers: int = 1
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # rows of TRACE_HEADER

    def to_dict(self, with_trace: bool = False) -> dict:
        d = asdict(self)
        d["ci"] = list(self.ci)
        if not with_trace:
            d.pop("trace")
        for key in ("rel_half_width",):
            if not math.isfinite(d[key]):
                d[key] = None
        return d


class _Running:
    """Mergeable count / mean / sum of squared deviations (Chan et al.)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.hits = 0

    def add(self, w: np.ndarray) -> None:
        nb = w.size
        if nb == 0:
            return
        mb = float(w.mean())
        m2b = float(np.sum((w - mb) ** 2))
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n
        self.hits += int(np.count_nonzero(w))

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else math.inf


def _batch_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _run(weigh: Callable[[int], np.ndarray], rule: StoppingRule, seed: int, method: str, workers: int) -> EstimateReport:
    z = rule.z
    acc = _Running()
    trace = []
    converged = False
    b = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while acc.n < rule.max_samples and not converged:
            # Batches are seeded by index, so results do not depend on the worker count.
            count = workers if pool else 1
            idx = list(range(b, b + count))
            batches = list(pool.map(weigh, idx)) if pool else [weigh(i) for i in idx]
            for w in batches:
                if acc.n >= rule.max_samples:
                    break
                b += 1
                acc.add(w[: rule.max_samples - acc.n])
                sd = math.sqrt(acc.variance) if acc.n > 1 else math.inf
                half = z * sd / math.sqrt(acc.n)
                est = acc.mean
                rel = half / est if est > 0 else math.inf
                trace.append((acc.n, est, est - half, est + half, rel))
                if acc.n >= rule.min_samples and acc.hits >= rule.min_hits and rel < rule.beta:
                    converged = True
                    break
    finally:
        if pool:
            pool.shutdown()
    n, est, lo, hi, rel = trace[-1]
    flags = [] if acc.hits else ["no events observed"]
    return EstimateReport(
        estimate=est,
        n=n,
        variance=acc.variance,
        confidence=1.0 - rule.alpha,
        ci=(lo, hi),
        rel_half_width=rel,
        method=method,
        hits=acc.hits,
        converged=converged,
        seed=seed,
        workers=workers,
        flags=flags,
        trace=trace,
    )


def _indicator_values(indicator, x) -> np.ndarray:
    v = np.asarray(indicator(x), dtype=float).reshape(-1)
    if np.any((v != 0) & (v != 1)):
        raise EstimationError("indicator must return 0/1 values")
    return v


def estimate_crude(indicator, model, rule: StoppingRule = StoppingRule(), seed: int = 0, workers: int = 1) -> EstimateReport:
    """Sample mean of the indicator over draws from the model."""

    def weigh(b: int) -> np.ndarray:
        x = model.sample(_batch_rng(seed, b), rule.batch_size)
        return _indicator_values(indicator, x)

    return _run(weigh, rule, seed, "crude", workers)


def estimate_is(
    indicator,
    base,
    proposal,
    rule: StoppingRule = StoppingRule(),
    seed: int = 0,
    method: str = "IS-piecewise",
    workers: int = 1,
) -> EstimateReport:
    """Sample mean of indicator * dF/dF* over draws from the proposal."""
    check_support(base, proposal)

    def weigh(b: int) -> np.ndarray:
        x = proposal.sample(_batch_rng(seed, b), rule.batch_size)
        ind = _indicator_values(indicator, x)
        lr = np.exp(log_likelihood_ratio(base, proposal, x))
        w = ind * lr
        bad = ~np.isfinite(w)
        if bad.any():
            raise EstimationError(f"non-finite likelihood ratio at sample {x[np.flatnonzero(bad)[0]]!r}")
        return w

    return _run(weigh, rule, seed, method, workers)


def required_samples_crude(p_hat: float, alpha: float = 0.2, beta: float = 0.2) -> int:
    """Crude Monte Carlo sample size for relative half-width beta: z^2 (1 - p) / (beta^2 p)."""
    if not 0.0 < p_hat < 1.0:
        raise ValueError(f"probability estimate must lie in (0, 1), got {p_hat}")
    z = normal_quantile(1.0 - alpha / 2.0)
    return math.ceil(z * z * (1.0 - p_hat) / (beta * beta * p_hat))


def convergence_trace(report: EstimateReport) -> list:
    return list(report.trace)


def write_trace_csv(report: EstimateReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in report.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
