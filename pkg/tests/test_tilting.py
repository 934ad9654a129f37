import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from rareeval.distributions import BoundedExponential, BoundedNormal, BoundedNormalMixture, PiecewiseMixture
from rareeval.tilting import (
    SupportMismatchError,
    TiltedPiecewise,
    likelihood_ratio,
    log_likelihood_ratio,
    log_mgf,
    tilt_exponential_piece,
    tilt_mixture_piece,
    tilt_normal_piece,
    tilt_piece,
)

INF = math.inf
LR_TEN = 0.0012340980408667955  # e^-9 / 0.1, mpmath


def exp1():
    return PiecewiseMixture((0.0, INF), (1.0,), (BoundedExponential(1.0),))


def ttc_like():
    body = BoundedNormalMixture((0.6, 0.4), (0.05, 0.15), 0.0, 0.4)
    return PiecewiseMixture((0.0, 0.4, INF), (0.95, 0.05), (body, BoundedExponential(38.0, 0.4, INF)))


def quad_tilt(piece, theta, x):
    """e^{theta x} f(x) / Z with Z by quadrature."""
    hi = piece.upper if math.isfinite(piece.upper) else piece.lower + 60.0 / max(getattr(piece, "rate", 1.0) - theta, 1e-3)
    z, _ = integrate.quad(lambda v: math.exp(theta * v) * float(piece.pdf(v)), piece.lower, hi, limit=400, epsabs=0, epsrel=1e-12)
    return np.exp(theta * x) * piece.pdf(x) / z


def test_exponential_tilt_examples():
    assert tilt_exponential_piece(BoundedExponential(2.0), 0.5).rate == 1.5
    p = BoundedExponential(2.0, 0.5, 3.0)
    assert tilt_exponential_piece(p, 0.0) is p
    with pytest.raises(ValueError):
        tilt_exponential_piece(BoundedExponential(1.0), 1.0)
    with pytest.raises(ValueError):
        tilt_exponential_piece(BoundedExponential(1.0), 1.0 - 1e-10)


def test_exponential_tilt_mean():
    q = tilt_exponential_piece(BoundedExponential(1.0), 0.9)
    x = q.ppf(np.random.default_rng(0).random(100_000))
    assert abs(x.mean() - 10.0) < 3 * 10.0 / math.sqrt(1e5)


def test_normal_tilt_examples():
    q = tilt_normal_piece(BoundedNormal(1.0), 2.0)
    assert (q.mu, q.sigma) == (2.0, 1.0)
    p = BoundedNormal(0.5, 0.0, 0.0, 1.0)
    assert tilt_normal_piece(p, 0.0) is p
    t = tilt_normal_piece(BoundedNormal(0.7, 0.0, 0.2, 2.0), 3.0)
    val, _ = integrate.quad(lambda v: float(t.pdf(v)), 0.2, 2.0)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_mixture_tilt_examples():
    m = BoundedNormalMixture((0.3, 0.7), (0.5, 1.5), 0.0, 3.0)
    assert tilt_mixture_piece(m, 0.0) is m
    one = BoundedNormalMixture((1.0,), (0.8,), 0.0, 2.0)
    xs = np.linspace(0.0, 1.99, 50)
    np.testing.assert_allclose(
        tilt_mixture_piece(one, 1.3).pdf(xs), tilt_normal_piece(BoundedNormal(0.8, 0.0, 0.0, 2.0), 1.3).pdf(xs), rtol=1e-12
    )


@pytest.mark.parametrize(
    "piece,theta",
    [
        (BoundedNormalMixture((0.3, 0.7), (0.5, 1.5), 0.0, 3.0), 1.0),
        (BoundedNormalMixture((0.6, 0.4), (0.05, 0.15), 0.0, 0.4), 15.0),
        (BoundedNormalMixture((0.5, 0.5), (1.0, 2.0), 0.0, INF), -0.7),
        (BoundedNormal(1.0, 0.0, 0.0, 2.0), 2.5),
        (BoundedExponential(2.0, 0.0, 1.0), -3.0),
        (BoundedExponential(1.0, 0.0, INF), 0.9),
        (BoundedExponential(38.0, 0.4, INF), 30.0),
    ],
)
def test_tilt_identity_against_quadrature(piece, theta):
    hi = piece.upper if math.isfinite(piece.upper) else piece.lower + 5.0
    xs = np.linspace(piece.lower, hi, 100, endpoint=False)
    got = tilt_piece(piece, theta).pdf(xs)
    np.testing.assert_allclose(got, quad_tilt(piece, theta, xs), rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize(
    "piece,theta",
    [
        (BoundedExponential(2.0, 0.5, 3.0), 1.2),
        (BoundedNormal(0.7, 0.0, 0.2, 2.0), -1.5),
        (BoundedNormalMixture((0.3, 0.7), (0.5, 1.5), 0.0, 3.0), 0.8),
    ],
)
def test_log_mgf_against_quadrature(piece, theta):
    val, _ = integrate.quad(lambda v: math.exp(theta * v) * float(piece.pdf(v)), piece.lower, piece.upper, epsrel=1e-12)
    assert log_mgf(piece, theta) == pytest.approx(math.log(val), abs=1e-9)


@given(rate=st.floats(0.1, 50.0), frac=st.floats(-5.0, 0.99), lo=st.floats(0.0, 2.0), width=st.floats(0.05, 5.0))
def test_property_exponential_closure(rate, frac, lo, width):
    p = BoundedExponential(rate, lo, lo + width)
    theta = frac * rate
    q = tilt_exponential_piece(p, theta)
    assert isinstance(q, BoundedExponential) and q.rate == pytest.approx(rate - theta)
    x = np.linspace(lo, lo + width, 7, endpoint=False)
    # Ratio of tilted to base density is proportional to e^{theta x}.
    r = np.log(q.pdf(x)) - np.log(p.pdf(x)) - theta * x
    assert np.ptp(r) < 1e-8 * max(1.0, abs(theta) * (lo + width))


# -- likelihood ratio --------------------------------------------------------------


def test_identity_proposal_ratio_is_one():
    for base in (exp1(), ttc_like()):
        prop = TiltedPiecewise.identity(base)
        x = prop.sample(np.random.default_rng(0), 5000)
        np.testing.assert_allclose(likelihood_ratio(base, prop, x), 1.0, atol=1e-12, rtol=0)
        assert likelihood_ratio(base, base, x).max() == 1.0


def test_ratio_expectation_is_one():
    base = ttc_like()
    prop = TiltedPiecewise(base, (4.0, 20.0), (0.6, 0.4))
    x = prop.sample(np.random.default_rng(1), 100_000)
    w = likelihood_ratio(base, prop, x)
    assert abs(w.mean() - 1.0) < 3 * w.std(ddof=1) / math.sqrt(w.size)


def test_ratio_hand_value():
    prop = TiltedPiecewise(exp1(), (0.9,), (1.0,))
    assert likelihood_ratio(exp1(), prop, 10.0) == pytest.approx(LR_TEN, rel=1e-12)


def test_ratio_deep_tail_no_underflow():
    base = exp1()
    prop = TiltedPiecewise(base, (0.999,), (1.0,))
    lr = log_likelihood_ratio(base, prop, np.array([800.0]))
    assert np.isfinite(lr[0]) and lr[0] < -700


def test_support_mismatch_raises():
    base = PiecewiseMixture((0.0, 1.0, INF), (0.5, 0.5), (BoundedExponential(1.0, 0, 1), BoundedExponential(1.0, 1, INF)))
    prop = TiltedPiecewise(base, (0.0, 0.0), (1.0, 0.0))
    with pytest.raises(SupportMismatchError):
        likelihood_ratio(base, prop, 2.0)


@given(th=st.lists(st.floats(-30.0, 30.0), min_size=2, max_size=2), w=st.floats(0.01, 0.99))
def test_property_support_preserved(th, w):
    base = ttc_like()
    prop = TiltedPiecewise(base, (th[0], min(th[1], 37.0)), (w, 1 - w))
    x = np.concatenate([np.linspace(0, 0.399, 20), np.linspace(0.4, 3.0, 20)])
    assert np.all(np.isfinite(log_likelihood_ratio(base, prop, x)))


# -- TiltedPiecewise ------------------------------------------------------------------


def test_zero_tilt_recovers_base_pdf():
    base = ttc_like()
    prop = TiltedPiecewise(base, (0.0, 0.0), base.weights)
    xs = np.linspace(0, 1, 101)
    np.testing.assert_array_equal(prop.pdf(xs), base.pdf(xs))


def test_rejects_bad_parameters():
    base = ttc_like()
    with pytest.raises(ValueError):
        TiltedPiecewise(base, (0.0, 38.0), (0.5, 0.5))
    with pytest.raises(ValueError):
        TiltedPiecewise(base, (0.0,), (1.0,))
    with pytest.raises(ValueError):
        TiltedPiecewise(base, (0.0, 0.0), (0.5, 0.6))


def test_json_roundtrip():
    base = ttc_like()
    prop = TiltedPiecewise(base, (3.5, 12.0), (0.3, 0.7), (0.0, 0.55, INF))
    doc = json.loads(json.dumps(prop.to_dict()))
    assert doc["theta"] == [3.5, 12.0] and doc["proposal_weights"] == [0.3, 0.7]
    back = TiltedPiecewise.from_dict(doc)
    assert back.proposal == prop.proposal and back.base == base
