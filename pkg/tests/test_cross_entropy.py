import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from rareeval.distributions import BoundedExponential, BoundedNormal, PiecewiseMixture
from rareeval.tilting import TiltedPiecewise, likelihood_ratio
from rareeval.cross_entropy import (
    AdaptiveEventSchedule,
    CEConfig,
    CEError,
    PiecewiseFamily,
    SingleExponentialFamily,
    TailEvent,
    adjust_sample_size,
    apply_floor,
    ce_exponential_objective,
    ce_iterate,
    ce_normal_objective,
    ce_theta_fallback,
    ce_update_theta_exponential,
    ce_update_theta_normal,
    ce_update_weights,
    max_tail_weight,
    shift_truncations,
)

INF = math.inf


def exp1():
    return PiecewiseMixture((0.0, INF), (1.0,), (BoundedExponential(1.0),))


def two_piece(knot=2.0):
    w0 = -math.expm1(-knot)
    return PiecewiseMixture(
        (0.0, knot, INF), (w0, 1 - w0), (BoundedExponential(1.0, 0.0, knot), BoundedExponential(1.0, knot, INF))
    )


class Always:
    def score(self, x, ctx=None):
        return np.zeros(len(x))


# -- weight update -------------------------------------------------------------


def test_weight_examples():
    assert ce_update_weights([0, 1, 0, 1], np.ones(4), 2) == (0.5, 0.5)
    assert ce_update_weights([0, 0, 0], np.ones(3), 2, floor=0.01) == pytest.approx((0.99, 0.01), abs=1e-15)
    assert ce_update_weights([0, 0, 1], [2.0, 1.0, 1.0], 2) == (0.75, 0.25)
    with pytest.raises(CEError, match="no rare events"):
        ce_update_weights([0, 1], [0.0, 0.0], 2)


def test_floor_validation():
    with pytest.raises(ValueError):
        apply_floor((0.5, 0.5), 0.5)
    assert max_tail_weight(3, 0.01) == pytest.approx(0.98)


@given(
    raw=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6).filter(lambda r: sum(r) > 1e-6),
    frac=st.floats(0.01, 0.99),
)
def test_property_floor(raw, frac):
    k = len(raw)
    floor = frac / k
    w = np.asarray(raw) / sum(raw)
    out = np.asarray(apply_floor(w, floor))
    assert out.min() >= floor - 1e-15
    assert abs(out.sum() - 1.0) < 1e-12
    free = out > floor + 1e-12
    # Pieces left above the floor keep their relative proportions.
    if free.sum() >= 2:
        ratio = out[free] / w[free]
        assert np.ptp(ratio) < 1e-9 * ratio.max()


# -- tilt updates ----------------------------------------------------------------


def test_theta_exponential_example():
    x = np.array([5.0, 11.0, 17.0])
    theta = ce_update_theta_exponential(BoundedExponential(1.0), x, np.ones(3))
    # Grid oracle at 1e-5 on ln(l - theta) - (l - theta) * mean.
    grid = np.arange(0.0, 0.99999, 1e-5)
    oracle = grid[np.argmax(np.log(1 - grid) - (1 - grid) * 11.0)]
    assert abs(theta - oracle) < 1e-5
    assert theta == pytest.approx(10 / 11, abs=1e-9)


def test_theta_exponential_untilted_and_local_opt():
    assert ce_update_theta_exponential(BoundedExponential(2.0), np.array([0.25, 0.75]), np.ones(2)) == pytest.approx(0.0, abs=1e-9)
    piece = BoundedExponential(1.0, 0.0, 4.0)
    x = np.array([0.5, 2.5, 3.2, 3.9])
    c = np.array([1.0, 2.0, 0.5, 1.5])
    th = ce_update_theta_exponential(piece, x, c)
    best = ce_exponential_objective(th, piece, x, c)
    assert best >= ce_exponential_objective(th + 1e-3, piece, x, c)
    assert best >= ce_exponential_objective(th - 1e-3, piece, x, c)


def test_theta_normal_untruncated():
    x = np.array([1.0, 2.0, 4.0])
    c = np.array([1.0, 1.0, 2.0])
    th = ce_update_theta_normal(BoundedNormal(1.5, 0.0, -INF, INF), x, c)
    assert th * 1.5**2 == pytest.approx(np.average(x, weights=c), rel=1e-12)


def test_theta_normal_symmetric():
    th = ce_update_theta_normal(BoundedNormal(1.0, 0.0, -2.0, 2.0), np.array([-1.0, 1.0]), np.ones(2))
    assert th == pytest.approx(0.0, abs=1e-8)


def test_theta_normal_grid_oracle():
    x = np.array([1.0, 1.5, 2.5, 3.0])
    c = np.ones(4)
    th = ce_update_theta_normal(BoundedNormal(1.0, 0.0, 0.0, INF), x, c)
    grid = np.arange(0.0, 5.0, 1e-5)
    # On [0, inf) with sigma 1 the log-normalizer ratio is ln(Phi(theta) / 0.5).
    obj = grid * x.sum() - 4 * (grid**2 / 2 + norm.logcdf(grid) - math.log(0.5))
    oracle = grid[np.argmax(obj)]
    assert abs(th - oracle) < 1e-4
    piece = BoundedNormal(1.0, 0.0, 0.0, INF)
    assert ce_normal_objective(th, piece, x, c) == pytest.approx(obj.max(), abs=1e-6)


def test_fallback():
    assert ce_theta_fallback(None) == 0.0
    assert ce_theta_fallback(0.5) == 0.5


# -- truncation shift and sample size -------------------------------------------------


def test_shift_examples():
    base = PiecewiseMixture(
        (0.0, 1.0, 2.0, INF),
        (0.5, 0.3, 0.2),
        (BoundedExponential(1.0, 0, 1), BoundedExponential(1.0, 1, 2), BoundedExponential(1.0, 2, INF)),
    )
    prop = TiltedPiecewise(base, (0.2, 0.4, 0.6), (0.2, 0.3, 0.5))
    assert shift_truncations(prop, 0.0) is prop
    moved = shift_truncations(prop, 0.5)
    assert moved.truncations == (0.0, 1.5, 2.5, INF)
    total, _ = integrate.quad(lambda v: float(moved.pdf(v)), 0, 60, points=[1.5, 2.5], limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)
    # Base density keeps its own knots; the ratio stays finite everywhere.
    assert np.all(np.isfinite(likelihood_ratio(base, moved, np.linspace(0, 10, 101))))


def test_adjust_sample_size():
    cfg = CEConfig(n_samples=1000, max_samples=8000, min_hits=10)
    assert adjust_sample_size([[50, 20]], [[0.5, 0.5]], 1000, cfg) == (1000, None)
    n, seen = 1000, [1000]
    while True:
        new, warn = adjust_sample_size([[50, 0]], [[0.5, 0.5]], n, cfg)
        if new == n:
            break
        n = new
        seen.append(n)
    assert seen == [1000, 2000, 4000, 8000] and warn and "cap" in warn
    assert adjust_sample_size([[50, 0]], [[0.99, 0.01]], 1000, cfg) == (1000, None)


# -- CE loop ---------------------------------------------------------------------


def run_exp_toy(seed):
    return ce_iterate([PiecewiseFamily(exp1())], TailEvent(10.0), CEConfig(), AdaptiveEventSchedule(0.1), seed=seed)


def test_analytic_toy_convergence():
    thetas, fracs = [], []
    for seed in range(10):
        res = run_exp_toy(seed)
        thetas.append(res.proposals[0].thetas[0])
        fracs.append(res.final.hits / res.final.n)
    assert sum(0.86 <= t <= 0.95 for t in thetas) >= 9
    assert abs(np.median(thetas) - 10 / 11) < 0.05
    assert min(fracs) >= 0.2


def test_trace_invariants():
    res = run_exp_toy(3)
    levels = [s.level for s in res.states]
    assert all(b <= a for a, b in zip(levels, levels[1:])) and levels[-1] == 0.0
    for s in res.states:
        hit = s.samples[:, 0] >= 10.0 - s.level
        assert np.all(s.weights >= 0) and np.array_equal(s.weights > 0, hit)
    rec = res.final.record(res.families)
    assert rec["level"] == 0.0 and rec["thresholds"] == {"x": 10.0}


def test_seed_reproducible():
    a, b = run_exp_toy(5), run_exp_toy(5)
    assert [s.record(a.families) for s in a.states] == [s.record(b.families) for s in b.states]


def test_certain_event_returns_base():
    base = two_piece()
    res = ce_iterate([PiecewiseFamily(base)], Always(), CEConfig(max_iter=5), seed=0)
    prop = res.proposals[0]
    assert np.allclose(prop.thetas, 0.0, atol=0.15)
    assert np.allclose(prop.proposal_weights, base.weights, atol=0.05)


def test_weights_unbiased_for_relaxed_event():
    base = exp1()
    fam = PiecewiseFamily(base)
    prop = TiltedPiecewise(base, (0.5,), (1.0,))
    res = ce_iterate([fam], TailEvent(3.0), CEConfig(n_samples=20000, max_iter=1, max_samples=20000),
                     AdaptiveEventSchedule(levels=(0.0,)), seed=1, initial=[prop])
    s = res.states[0]
    est = s.weights.mean()
    crude = (np.random.default_rng(2).exponential(size=20000) >= 3.0).astype(float)
    se = math.hypot(s.weights.std(ddof=1), crude.std(ddof=1)) / math.sqrt(20000)
    assert abs(est - crude.mean()) < 3 * se
    assert abs(est - math.exp(-3)) < 3 * s.weights.std(ddof=1) / math.sqrt(20000)


def test_decoupling():
    class SumEvent:
        def score(self, x, ctx=None):
            return np.maximum(6.0 - x.sum(axis=1), 0.0)

    fa, fb = PiecewiseFamily(two_piece(1.0)), PiecewiseFamily(two_piece(2.0))
    res = ce_iterate([fa, fb], SumEvent(), CEConfig(max_iter=6), seed=4)
    cfg = CEConfig()
    for s in res.states:
        for v, fam in enumerate((fa, fb)):
            alone, _ = fam.update(s.sampling[v], s.samples[:, v], s.weights, cfg, first=(s.iteration == 1))
            np.testing.assert_allclose(alone.thetas, s.updated[v].thetas, atol=1e-10, rtol=0)
            np.testing.assert_allclose(alone.proposal_weights, s.updated[v].proposal_weights, atol=1e-10, rtol=0)


@given(scores=st.lists(st.floats(0, 100), min_size=1, max_size=50), prev=st.floats(0, 200), rho=st.floats(0.01, 0.99))
def test_property_schedule_monotone(scores, prev, rho):
    sched = AdaptiveEventSchedule(rho)
    lvl = sched.next_level(np.array(scores), prev, 2)
    assert 0.0 <= lvl <= prev
    if lvl < prev:
        assert np.mean(np.array(scores) <= lvl) >= rho - 1e-12


def test_fixed_schedule_validation():
    with pytest.raises(ValueError):
        AdaptiveEventSchedule(levels=(3.0, 4.0, 0.0))
    with pytest.raises(ValueError):
        AdaptiveEventSchedule(levels=(3.0, 1.0))
    assert AdaptiveEventSchedule(levels=(3, 1, 0)).next_level(np.zeros(1), INF, 9) == 0.0


# -- safeguard fixtures ------------------------------------------------------------


def test_floor_holds_every_update():
    base = PiecewiseMixture(
        (0.0, 0.5, 2.0, INF),
        (0.6, 0.3, 0.1),
        (BoundedExponential(2.0, 0, 0.5), BoundedExponential(1.0, 0.5, 2.0), BoundedExponential(1.5, 2.0, INF)),
    )
    res = ce_iterate([PiecewiseFamily(base)], TailEvent(8.0), CEConfig(pi_floor=0.02), seed=0)
    for s in res.states:
        w = np.asarray(s.updated[0].proposal_weights)
        assert w.min() >= 0.02 - 1e-15 and abs(w.sum() - 1) < 1e-12


def test_starved_piece_fallback():
    # The event lives in the tail piece, so the body piece never sees a hit.
    base = two_piece(2.0)
    res = ce_iterate([PiecewiseFamily(base)], TailEvent(5.0), CEConfig(max_iter=8), seed=0)
    first, later = res.states[0], res.states[1:]
    assert first.fallback == [[0]] and first.updated[0].thetas[0] == 0.0
    assert first.updated[0].proposal_weights[0] == pytest.approx(0.01)
    for prev, s in zip(res.states, later):
        if 0 in s.fallback[0]:
            assert s.updated[0].thetas[0] == prev.updated[0].thetas[0]
    assert res.final.record(res.families)["variables"][0]["fallback_pieces"] == [0]


def test_misplaced_knot_shift_restores_hits():
    # Tail knot at 1 with the event at 30: the tail proposal is already at its
    # maximum weight yet cannot reach the event without moving the knot.
    base = two_piece(1.0)
    start = TiltedPiecewise(base, (0.0, 0.0), (0.01, 0.99))
    fixed = AdaptiveEventSchedule(levels=(0.0,))
    with pytest.raises(CEError, match="no rare events"):
        ce_iterate([PiecewiseFamily(base)], TailEvent(30.0), CEConfig(max_iter=1), fixed, seed=0, initial=[start])
    cfg = CEConfig(max_iter=1, shift_step=5.0)
    res = ce_iterate([PiecewiseFamily(base)], TailEvent(30.0), cfg, fixed, seed=0, initial=[start])
    s = res.states[0]
    assert s.shifts >= 1 and s.hits >= cfg.min_hits
    assert s.sampling[0].truncations[1] == 1.0 + 5.0 * s.shifts
    # The shifted proposal still gives an unbiased weight for P(X > 30).
    assert s.weights.mean() == pytest.approx(math.exp(-30), rel=0.2)


def test_single_family():
    fam = SingleExponentialFamily(exp1())
    assert fam.initial().pieces[0].rate == pytest.approx(1.0, rel=1e-6)
    res = ce_iterate([fam], TailEvent(10.0), CEConfig(), seed=0)
    assert res.proposals[0].pieces[0].rate == pytest.approx(1 / 11, rel=0.1)
