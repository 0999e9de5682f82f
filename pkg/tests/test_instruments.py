import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from bandhedge.instruments import (
    Instrument,
    LookbackGreeks,
    bs_delta,
    bs_gamma,
    european_call,
    lookback_call,
    lookback_delta_gamma,
    payoff,
)
from bandhedge.market import DEFAULT_MARKET, generate_paths

TAU = 30 / 365


def bs_call(s, k, sigma, tau):
    d1 = (math.log(s / k) + 0.5 * sigma**2 * tau) / (sigma * math.sqrt(tau))
    return s * norm.cdf(d1) - k * norm.cdf(d1 - sigma * math.sqrt(tau))


def test_payoff_examples():
    assert payoff(european_call(1.0), np.array([1.0, 1.2, 1.05])) == pytest.approx(0.05)
    assert payoff(european_call(1.0), np.array([1.0, 1.2, 0.95])) == 0.0
    assert payoff(lookback_call(1.03), np.array([1.0, 1.10, 0.9])) == pytest.approx(0.07)


def test_lookback_max_includes_both_ends():
    inst = lookback_call(1.0)
    assert payoff(inst, np.array([1.2, 0.9, 0.8])) == pytest.approx(0.2)
    assert payoff(inst, np.array([0.9, 0.8, 1.3])) == pytest.approx(0.3)


def test_payoff_on_matrix_rows():
    p = generate_paths(DEFAULT_MARKET, 50, 4).prices
    z = payoff(european_call(), p)
    assert z.shape == (50,)
    assert z[3] == payoff(european_call(), p[3])


def test_invalid_strike():
    with pytest.raises(ValueError):
        Instrument("european_call", 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.5, 1.5), min_size=2, max_size=12), st.floats(0.8, 1.2))
def test_lookback_dominates_european(path, k):
    p = np.array(path)
    assert payoff(lookback_call(k), p) >= payoff(european_call(k), p) >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.floats(0, 1))
def test_payoff_convex_in_terminal_price(a, b, w):
    inst = european_call(1.0)
    mix = payoff(inst, np.array([1.0, w * a + (1 - w) * b]))
    assert mix <= w * payoff(inst, np.array([1.0, a])) + (1 - w) * payoff(inst, np.array([1.0, b])) + 1e-15


def test_delta_examples():
    assert bs_delta(2.0, 1.0, 0.2, TAU) == pytest.approx(1.0, abs=1e-9)
    assert bs_delta(0.9, 1.0, 0.2, 0.0) == 0.0
    assert bs_delta(1.1, 1.0, 0.2, 0.0) == 1.0
    assert bs_delta(1.0, 1.0, 0.2, 0.0) == 0.5


def test_atm_delta_oracle():
    d1 = 0.2 * math.sqrt(TAU) / 2
    assert bs_delta(1.0, 1.0, 0.2, TAU) == pytest.approx(norm.cdf(d1), abs=1e-14)
    assert bs_delta(1.0, 1.0, 0.2, TAU) == pytest.approx(0.511434, abs=2e-6)


def test_atm_gamma_oracle():
    d1 = 0.2 * math.sqrt(TAU) / 2
    oracle = norm.pdf(d1) / (0.2 * math.sqrt(TAU))
    assert bs_gamma(1.0, 1.0, 0.2, TAU) == pytest.approx(oracle, rel=1e-13)
    assert bs_gamma(1.0, 1.0, 0.2, TAU) == pytest.approx(6.954844, abs=1e-6)


def test_greeks_match_differences_of_the_price():
    s, h = 1.03, 1e-4
    up, mid, dn = (bs_call(x, 1.0, 0.2, TAU) for x in (s + h, s, s - h))
    assert bs_delta(s, 1.0, 0.2, TAU) == pytest.approx((up - dn) / (2 * h), rel=1e-6)
    assert bs_gamma(s, 1.0, 0.2, TAU) == pytest.approx((up - 2 * mid + dn) / h**2, rel=1e-4)


def test_gamma_tail_and_expiry():
    assert bs_gamma(50.0, 1.0, 0.2, TAU) < 1e-12
    with pytest.raises(ValueError):
        bs_gamma(1.0, 1.0, 0.2, 0.0)


def test_delta_bounded_and_monotone_on_grid():
    s = np.linspace(0.5, 2.0, 301)
    for tau in (1 / 365, TAU, 1.0):
        d = bs_delta(s, 1.0, 0.2, tau)
        assert np.all((d >= 0) & (d <= 1))
        assert np.all(np.diff(d) >= 0)
        assert np.all(bs_gamma(s, 1.0, 0.2, tau) >= 0)


@pytest.fixture(scope="module")
def greeks():
    return LookbackGreeks(1.03, 0.2, DEFAULT_MARKET.dt, n_samples=1 << 15)


def test_lookback_fast_price_matches_bruteforce(greeks):
    for s, m, n in [(1.0, 1.0, 30), (1.02, 1.05, 12), (0.97, 1.01, 1), (1.1, 1.1, 5)]:
        assert greeks.price(s, m, n) == pytest.approx(greeks.price_bruteforce(s, m, n).mean(), rel=1e-12, abs=1e-15)


def test_lookback_delta_is_zero_when_max_is_locked(greeks):
    d, g = greeks.delta_gamma(np.array([0.8]), np.array([1.5]), 5)
    assert abs(d[0]) < 1e-12 and abs(g[0]) < 1e-9


def test_lookback_delta_within_bounds(greeks):
    for s, m, n in [(1.0, 1.0, 30), (1.05, 1.05, 10), (0.95, 1.0, 20)]:
        d, se = greeks.delta_stderr(s, m, n)
        assert -3 * se <= d <= 1 + 3 * se


def test_lookback_delta_converges_with_sample_size():
    small = LookbackGreeks(1.03, 0.2, DEFAULT_MARKET.dt, n_samples=1 << 14, seed=5)
    large = LookbackGreeks(1.03, 0.2, DEFAULT_MARKET.dt, n_samples=1 << 15, seed=5)
    d1, se1 = small.delta_stderr(1.0, 1.0, 20)
    d2, se2 = large.delta_stderr(1.0, 1.0, 20)
    assert abs(d1 - d2) < 3 * math.hypot(se1, se2)


def test_lookback_greeks_reject_expiry():
    with pytest.raises(ValueError):
        lookback_delta_gamma(DEFAULT_MARKET, lookback_call(), 1.0, 1.0, 0.0)


def test_lookback_greeks_on_grid_only(greeks):
    with pytest.raises(ValueError):
        greeks.steps_for(0.5 * DEFAULT_MARKET.dt)
    assert greeks.steps_for(15 * DEFAULT_MARKET.dt) == 15
