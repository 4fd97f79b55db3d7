import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectrec.signals import (SIGNAL_FIELDS, SpikeMParams, _fit_one, _start, autocorr_lag1,
                               holt_winters_fit_forecast, model_space, rank_gamma, seasonality,
                               signal_vector, spikem_fit, spikem_simulate, surprise)

REFERENCE = SpikeMParams(n_pop=1000, beta=1.0, n_b=5, s_b=10, eps=0.1, p_a=0, p_p=7, p_s=0)
# a slower, non-saturating cascade used for the fit checks
GRADUAL = SpikeMParams(n_pop=1000, beta=0.002, n_b=3, s_b=2, eps=0.0, p_a=0, p_p=7, p_s=0)


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


# -- seasonality ------------------------------------------------------------

def test_seasonality_sinusoid():
    y = 5 + np.sin(2 * np.pi * np.arange(28) / 7)
    assert seasonality(y, 7) > 0.99


def test_seasonality_noise_is_low():
    rng = np.random.default_rng(0)
    vals = [seasonality(rng.random(84), 7) for _ in range(50)]
    assert np.mean(np.array(vals) < 0.3) >= 0.95


def test_seasonality_constant_and_short():
    assert seasonality(np.full(21, 3.0), 7) == 0.0
    with pytest.raises(ValueError, match="insufficient data"):
        seasonality(np.ones(13), 7)


# -- autocorrelation --------------------------------------------------------

def test_autocorr_hand_values():
    assert autocorr_lag1([1, 2, 3, 4, 5]) == pytest.approx(0.4)
    assert autocorr_lag1([1, -1, 1, -1]) == pytest.approx(-0.75)
    with pytest.raises(ValueError, match="constant"):
        autocorr_lag1([2, 2, 2])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=40), st.floats(0.01, 100), st.floats(-50, 50))
def test_autocorr_affine_invariance(xs, a, b):
    x = np.asarray(xs)
    if np.var(x) < 1e-6:
        return
    r = autocorr_lag1(x)
    assert -1 - 1e-12 <= r <= 1 + 1e-12
    assert autocorr_lag1(a * x + b) == pytest.approx(r, abs=1e-9)


# -- gamma ------------------------------------------------------------------

def test_gamma_examples():
    assert rank_gamma(list("abcd"), list("abcd")) == 1.0
    assert rank_gamma(list("abcd"), list("dcba")) == -1.0
    assert rank_gamma(list("abc"), list("bac")) == pytest.approx(1 / 3)


def _brute_gamma(a, b):
    items = sorted(set(a) | set(b))
    ra = {x: a.index(x) + 1 if x in a else len(a) + 1 for x in items}
    rb = {x: b.index(x) + 1 if x in b else len(b) + 1 for x in items}
    nc = nd = 0
    for x, y in itertools.combinations(items, 2):
        s = (ra[x] - ra[y]) * (rb[x] - rb[y])
        nc += s > 0
        nd += s < 0
    return 0.0 if nc + nd == 0 else (nc - nd) / (nc + nd)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=8, unique=True),
       st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=8, unique=True))
def test_gamma_matches_brute_force(a, b):
    g = rank_gamma(a, b)
    assert g == pytest.approx(_brute_gamma(a, b))
    assert -1 <= g <= 1
    if len(a) > 1:
        assert rank_gamma(a, a[::-1]) == -1.0


# -- Holt-Winters and surprise ---------------------------------------------

def test_hw_constant_series():
    fit = holt_winters_fit_forecast(np.full(28, 4.0), 7, horizon=5)
    np.testing.assert_allclose(fit.forecast, 4.0)


def test_hw_periodic_series():
    y = 10 + 3 * np.sin(2 * np.pi * np.arange(35) / 7)
    fit = holt_winters_fit_forecast(y, 7)
    assert np.abs(fit.residuals[7:]).max() < 1e-6


def test_hw_linear_trend():
    y = 2.0 * np.arange(28)
    fit = holt_winters_fit_forecast(y, 7, horizon=5)
    expect = y[-1] + 2.0 * np.arange(1, 6)
    np.testing.assert_allclose(fit.forecast, expect, rtol=0.05)
    with pytest.raises(ValueError):
        holt_winters_fit_forecast(y[:10], 7)


def test_surprise_cases():
    y = 10 + 3 * np.sin(2 * np.pi * np.arange(35) / 7)
    assert surprise(y, 7) == pytest.approx(0.0, abs=1e-3)
    spiked = y.copy()
    spiked[-1] *= 10
    assert surprise(spiked, 7) > 5
    s = surprise(np.r_[np.zeros(20), 1.0], 7)
    assert np.isfinite(s) and s > 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=14, max_size=40))
def test_hw_always_finite(xs):
    fit = holt_winters_fit_forecast(np.asarray(xs), 7, horizon=3)
    assert np.isfinite(fit.fitted).all() and np.isfinite(fit.forecast).all()


# -- SpikeM -----------------------------------------------------------------

def test_spikem_no_propagation():
    p = SpikeMParams(1000, 0.0, 3, 10, 0.0, 0.2, 7, 0)
    np.testing.assert_array_equal(spikem_simulate(p, 20), 0.0)


def test_spikem_periodicity_off_and_on():
    flat = SpikeMParams(1000, 0.0, 0, 0, 1.0, 0.0, 7, 0)
    np.testing.assert_allclose(spikem_simulate(flat, 10)[1:], 1.0)
    wavy = SpikeMParams(1000, 0.0, 0, 0, 1.0, 0.5, 7, 0)
    n = np.arange(1, 10)
    np.testing.assert_allclose(spikem_simulate(wavy, 10)[1:], 1 + 0.5 * np.abs(np.sin(2 * np.pi * n / 7)))


def test_spikem_reference_fixture():
    y = spikem_simulate(REFERENCE, 30)
    # frozen regression values from the forward simulation
    assert int(np.argmax(y)) == 6
    assert y[6] == pytest.approx(1000.0)
    assert y[:6].sum() == 0 and y[7:].sum() == 0
    g = spikem_simulate(GRADUAL, 40)
    assert int(np.argmax(g)) == 10
    assert g[10] == pytest.approx(316.6, abs=0.05)
    with pytest.raises(ValueError):
        spikem_simulate(REFERENCE, 5)


def test_spikem_param_validation():
    with pytest.raises(ValueError):
        SpikeMParams(0, 1, 0, 0, 0, 0, 7, 0)
    with pytest.raises(ValueError):
        SpikeMParams(10, 1, 0, 0, 0, 1.0, 7, 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(1, 1e5), st.floats(0, 5), st.integers(0, 10), st.floats(0, 100), st.floats(0, 10),
       st.floats(0, 0.99), st.floats(1, 30), st.floats(-10, 10))
def test_spikem_conserves_population(n_pop, beta, n_b, s_b, eps, p_a, p_p, p_s):
    y = spikem_simulate(SpikeMParams(n_pop, beta, n_b, s_b, eps, p_a, p_p, p_s), 40)
    assert (y >= 0).all()
    assert y.sum() <= n_pop * (1 + 1e-12)


def test_spikem_fit_self_consistent():
    for params in (REFERENCE, GRADUAL):
        y = spikem_simulate(params, 40)
        fit = spikem_fit(y)
        assert _rmse(spikem_simulate(fit.params, 40), y) < 0.01 * y.max()


def test_spikem_fit_noisy():
    y = spikem_simulate(GRADUAL, 40)
    rng = np.random.default_rng(7)
    noisy = np.maximum(y + rng.normal(0, 0.05 * y.max(), len(y)), 0)
    fit = spikem_fit(noisy)
    assert _rmse(spikem_simulate(fit.params, 40), y) < 0.10 * y.max()


def test_spikem_fit_zero_series():
    fit = spikem_fit(np.zeros(20))
    assert fit.sse == pytest.approx(0.0)
    assert fit.params.beta == pytest.approx(0.0) and fit.params.eps == pytest.approx(0.0)
    with pytest.raises(ValueError):
        spikem_fit(np.zeros(10))


def test_lm_sse_never_increases():
    y = spikem_simulate(GRADUAL, 40)
    rng = np.random.default_rng(3)
    y = np.maximum(y + rng.normal(0, 5, len(y)), 0)
    theta0 = _start(y, 3, rng)
    prev = np.inf
    for iters in (1, 2, 4, 8, 16, 64):
        _, sse, _, _ = _fit_one(y, 3, theta0, iters)
        assert sse <= prev + 1e-9
        prev = sse


# -- assembled vector -------------------------------------------------------

def test_signal_vector_shape_and_model_space():
    rng = np.random.default_rng(0)
    q = rng.poisson(20, 60).astype(float)
    q[-3:] += [40, 120, 90]
    e = rng.poisson(3, 60).astype(float)
    v = signal_vector(q, e, ["a", "b", "c"], ["b", "a", "c"])
    x = v.as_array()
    assert x.shape == (len(SIGNAL_FIELDS),) == (13,)
    assert np.isfinite(x).all()
    assert 0 <= v.seasonality_query <= 1 and -1 <= v.autocorr_lag1 <= 1
    assert v.rank_gamma == pytest.approx(1 / 3) and v.surprise >= 0
    m = model_space(x[None])
    j = SIGNAL_FIELDS.index("spikem_p_s")
    assert 0 <= m[0, j] < x[SIGNAL_FIELDS.index("spikem_p_p")]
    assert m[0, SIGNAL_FIELDS.index("surprise")] == pytest.approx(np.log1p(v.surprise))
