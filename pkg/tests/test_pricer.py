from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FROZEN, bs_call_textbook, c_bs_direct
from tcrational.clocks import (
    DeterministicClock,
    Heston,
    MarketParams,
    VanillaContract,
    adjusted_log_moneyness,
    representative_clock_values,
)
from tcrational.fourier import carr_madan_price_at, carr_madan_prices
from tcrational.pricer import (
    CacheError,
    DegreePolicy,
    PricingError,
    SliceRejectedError,
    black_scholes_call,
    build_cache,
    build_slice,
    c_bs,
    cache_expectations,
    default_quadrature,
    error_report,
    price_call,
    price_call_record,
    price_expectation,
    price_grid_with_cache,
    price_put,
    price_with_cache,
    put_from_call,
    select_truncation,
    vg_variance_density,
)
from tcrational.storage import PRESETS

CASE_I = PRESETS["case-I"].model
CASE_II = PRESETS["case-II"].model
CASE_III = PRESETS["case-III"].model
CASE_V = PRESETS["case-V"].model
MARKET = MarketParams(1.0, 0.03, 0.01)
WORKED_DOMAIN = (0.0027, 0.0405)
WORKED_PRICE = 0.021403241


# --------------------------------------------------------------------------- #
# normalized Black-Scholes
# --------------------------------------------------------------------------- #

def test_c_bs_zero_variance_limit():
    assert c_bs(0.0, 0.1, 3.7) == pytest.approx(1 - math.exp(-0.1), abs=1e-16)
    assert c_bs(0.0, -0.1, 3.7) == 0.0


def test_c_bs_relation_to_textbook_formula():
    S0, K, T, r, q, sig = 1.0, 0.9, 2.0, 0.03, 0.01, 0.25
    # with x carrying the carry term the market parameter drops out
    lhs = S0 * math.exp(-q * T) * c_bs(sig**2 * T, math.log(S0 / K) + (r - q) * T, 0.0)
    assert lhs == pytest.approx(bs_call_textbook(S0, K, T, r, q, sig), abs=1e-15)
    ref = S0 * math.exp(-r * T) * c_bs(sig**2 * T, math.log(S0 / K), (r - q) / sig**2)
    assert ref == pytest.approx(bs_call_textbook(S0, K, T, r, q, sig), abs=1e-15)


def test_c_bs_worked_value_against_direct_oracle():
    assert c_bs_direct(0.04, 0.0594, -9.2596) == pytest.approx(FROZEN["c_bs(0.04; 0.0594, -9.2596)"], abs=1e-16)
    assert c_bs(0.04, 0.0594, -9.2596) == pytest.approx(FROZEN["c_bs(0.04; 0.0594, -9.2596)"], abs=1e-15)


@given(st.floats(1e-4, 2.0), st.floats(-1.0, 1.0))
def test_c_bs_symmetry(v, x):
    # c(v; -x, 0) = 1 - e^x + e^x c(v; x, 0)
    lhs = c_bs(v, -x, 0.0)
    rhs = 1.0 - math.exp(x) + math.exp(x) * c_bs(v, x, 0.0)
    assert abs(lhs - rhs) <= 1e-13


def test_black_scholes_zero_vol_is_forward_intrinsic():
    S0, K, T, r, q = 1.0, 0.9, 1.5, 0.03, 0.01
    expect = S0 * math.exp(-q * T) - K * math.exp(-r * T)
    assert black_scholes_call(S0, K, T, r, q, 0.0) == pytest.approx(expect, abs=1e-15)
    assert black_scholes_call(S0, 1.2, T, r, q, 0.0) == 0.0


def test_black_scholes_atm_zero_rate():
    from oracles import normal_cdf

    assert black_scholes_call(100, 100, 1, 0, 0, 0.2) == pytest.approx(100 * (2 * normal_cdf(0.1) - 1), abs=1e-12)


@given(
    st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.05, 3.0),
    st.floats(0.0, 0.08), st.floats(0.0, 0.08), st.floats(0.05, 0.8),
)
def test_black_scholes_matches_textbook(S0, K, T, r, q, sig):
    assert abs(black_scholes_call(S0, K, T, r, q, sig) - bs_call_textbook(S0, K, T, r, q, sig)) <= 1e-13


# --------------------------------------------------------------------------- #
# truncation
# --------------------------------------------------------------------------- #

@pytest.mark.parametrize(
    "model,T,a,b", [(CASE_I, 0.25, 2.84e-5, 0.0201), (CASE_II, 2.5, 0.0347, 0.1491)], ids=["I", "II"]
)
def test_quantile_truncation(model, T, a, b):
    lo, hi = select_truncation(model, MARKET, model.sigma, T, T)
    assert lo == pytest.approx(a, rel=0.05)
    assert hi == pytest.approx(b, rel=0.05)


def test_truncation_union_over_maturities():
    lo, hi = select_truncation(CASE_I, MARKET, CASE_I.sigma, 0.25, 2.5)
    assert lo == pytest.approx(2.84e-5, rel=0.05) and hi == pytest.approx(0.0735, rel=0.05)


def test_truncation_degenerate_heston():
    h = Heston(0.87, 0.07, 1e-8, 0.07)
    a, b = select_truncation(h, MARKET, 1.0, 1.0, 1.0)
    assert 0 < a < b and b - a < 1e-4
    assert a <= 0.07 <= b


def test_truncation_search_returns_a_candidate():
    a, b = select_truncation(CASE_I, MARKET, CASE_I.sigma, 1.0, 1.0, method="search", x=0.0594)
    assert 0 < a < b


def test_truncation_rejects_bad_inputs():
    with pytest.raises(PricingError):
        select_truncation(CASE_I, MARKET, CASE_I.sigma, 2.0, 1.0)
    with pytest.raises(PricingError):
        select_truncation(CASE_I, MARKET, CASE_I.sigma, 1.0, 1.0, method="search")


# --------------------------------------------------------------------------- #
# slices
# --------------------------------------------------------------------------- #

@pytest.fixture(scope="module")
def worked_slice():
    return build_slice(0.0594, -9.2596, WORKED_DOMAIN, DegreePolicy(forced=5, refine_iters=0, ray_angles=()))


def test_worked_slice_poles_and_fit(worked_slice):
    s = worked_slice
    assert s.degree == 5 and s.pf.poles.size == 5
    assert np.all(s.pf.poles.real < 0) and s.pf.correction is None
    assert s.fit_error <= 5e-8


def test_slice_invariants(worked_slice):
    s = worked_slice
    assert s.kernel_weights.shape == (s.quad.count,)
    assert s.fit_error <= s.threshold
    v = np.linspace(*WORKED_DOMAIN, 64)
    assert np.max(np.abs(s.approximate(v) - c_bs(v, s.x, s.mu))) <= s.fit_error + 1e-8


@given(st.floats(-0.15, 0.3), st.sampled_from([-9.2596, -2.0, 0.0]), st.floats(0.002, 0.02), st.floats(2.0, 20.0))
def test_slice_reconstruction(x, mu, a, ratio):
    dom = (a, a * ratio)
    try:
        s = build_slice(x, mu, dom)
    except SliceRejectedError:
        return
    v = np.linspace(*dom, 64)
    assert np.max(np.abs(s.approximate(v) - c_bs(v, x, mu))) <= s.fit_error + 1e-8


def test_slice_rejected_when_threshold_unreachable():
    with pytest.raises(SliceRejectedError):
        build_slice(0.0594, -9.2596, (1e-5, 0.5), DegreePolicy(max_degree=6, threshold=1e-30))


def test_slice_rejects_bad_domain():
    with pytest.raises(PricingError):
        build_slice(0.0, 0.0, (0.1, 0.05))


def test_case_iii_region_errors(preset_cache):
    cache = preset_cache("case-III")
    mats = PRESETS["case-III"].maturities
    vals = representative_clock_values(CASE_III, mats, n_paths=0)
    worst = 0.0
    for node in cache.nodes:
        for T in mats:
            if node.serves(T):
                worst = max(worst, error_report(node.slice, CASE_III, 1.0, T, vals[T])[1])
    assert worst <= 5.78e-9 * 10


# --------------------------------------------------------------------------- #
# expectations and prices
# --------------------------------------------------------------------------- #

@settings(max_examples=15)
@given(st.floats(0.1, 0.4), st.floats(0.8, 1.25), st.floats(0.25, 2.5))
def test_dirac_clock_collapse(sig, K, T):
    clock = DeterministicClock(sig, theta=-0.5 * sig**2)
    rec = price_call_record(clock, MARKET, VanillaContract(K, T))
    ref = black_scholes_call(1.0, K, T, 0.03, 0.01, sig)
    assert abs(rec.price - ref) <= rec.fit_error + 1e-8


def test_dirac_expectation_equals_pointwise_slice(worked_slice):
    z0 = 0.9
    sig = 0.15
    clock = DeterministicClock(sig)
    e = price_expectation(worked_slice, clock, sig, 1.0)
    assert e == pytest.approx(float(worked_slice.approximate(sig**2 * z0 / 0.9)[0]), abs=1e-12)
    assert abs(e - c_bs(sig**2, worked_slice.x, worked_slice.mu)) <= worked_slice.fit_error + 1e-8


def test_worked_example_price():
    rec = price_call_record(CASE_I, MARKET, VanillaContract(1.1, 1.0))
    assert rec.price == pytest.approx(WORKED_PRICE, abs=1e-7)
    assert rec.x == pytest.approx(0.0594, abs=5e-5)


def test_case_i_atm_matches_fft():
    ra = price_call(CASE_I, MARKET, VanillaContract(1.0, 1.0))
    fft = carr_madan_price_at(carr_madan_prices(CASE_I, MARKET, 1.0), 1.0)
    assert abs(ra - fft) <= 1e-6


def test_case_v_matches_fft():
    ra = price_call(CASE_V, MARKET, VanillaContract(1.0, 1.0))
    fft = carr_madan_price_at(carr_madan_prices(CASE_V, MARKET, 1.0), 1.0)
    assert abs(ra - fft) <= 2e-6


def test_deep_in_the_money_limit():
    assert price_call(CASE_I, MARKET, VanillaContract(1e-7, 1.0)) == pytest.approx(math.exp(-0.01), abs=1e-6)


def test_price_call_requires_call():
    with pytest.raises(PricingError):
        price_call(CASE_I, MARKET, VanillaContract(1.0, 1.0, "put"))
    with pytest.raises(PricingError):
        price_put(CASE_I, MARKET, VanillaContract(1.0, 1.0))


def test_put_at_forward_equals_call():
    T = 1.0
    K = math.exp((0.03 - 0.01) * T)
    call = price_call(CASE_I, MARKET, VanillaContract(K, T))
    put = price_put(CASE_I, MARKET, VanillaContract(K, T, "put"))
    assert abs(put - call) <= 1e-15


def test_worked_example_put():
    put = price_put(CASE_I, MARKET, VanillaContract(1.1, 1.0, "put"))
    assert put == pytest.approx(WORKED_PRICE + 1.1 * math.exp(-0.03) - math.exp(-0.01), abs=1e-7)


@given(
    st.lists(
        st.tuples(st.floats(0.0, 0.5), st.floats(0.5, 2.0), st.floats(0.05, 3.0)), min_size=20, max_size=20
    )
)
def test_parity_residual(contracts):
    for call, K, T in contracts:
        put = put_from_call(call, MARKET, K, T)
        resid = call - put - math.exp(-0.01 * T) + K * math.exp(-0.03 * T)
        assert abs(resid) < 1e-14


@pytest.mark.parametrize("K", [0.8, 0.9])
def test_heston_strike_symmetry(K):
    mk = MarketParams(1.0, 0.02, 0.02)
    F = math.exp(-0.02)
    c1 = price_call(CASE_III, mk, VanillaContract(K, 1.0)) / F
    c2 = price_call(CASE_III, mk, VanillaContract(1.0 / K, 1.0)) / F
    assert abs(c2 - (1.0 - 1.0 / K + c1 / K)) <= 1e-9


# --------------------------------------------------------------------------- #
# cache
# --------------------------------------------------------------------------- #

def test_single_contract_cache():
    c = VanillaContract(1.05, 0.75)
    cache = build_cache(CASE_I, MARKET, [c])
    direct = price_call_record(CASE_I, MARKET, c)
    err = max(n.slice.fit_error for n in cache.nodes)
    assert abs(price_with_cache(cache, c) - direct.price) <= 2 * max(err, direct.fit_error) + 1e-9


def test_cache_invariants(preset_cache):
    cache = preset_cache("case-I")
    assert np.all(np.diff(cache.x_grid) > 0)
    assert all(n.slice.fit_error <= n.slice.threshold for n in cache.nodes)
    cfg = PRESETS["case-I"]
    for T in cfg.maturities:
        x = adjusted_log_moneyness(CASE_I, MARKET, np.array(cfg.strikes), T)
        xs = [n.slice.x for n in cache.active(T)]
        assert xs[0] <= x.min() + 1e-9 and xs[-1] >= x.max() - 1e-9


def test_cache_node_queries(preset_cache):
    cache = preset_cache("case-I")
    T = 1.0
    for node in cache.active(T)[::5]:
        direct = price_expectation(node.slice, CASE_I, CASE_I.sigma, T)
        assert abs(float(cache_expectations(cache, T, node.slice.x)) - direct) <= 1e-14


def test_cache_mid_grid_vs_direct(preset_cache):
    cache = preset_cache("case-I")
    c = VanillaContract(1.035, 1.0)
    assert abs(price_with_cache(cache, c) - price_call(CASE_I, MARKET, c)) <= 5e-6


def test_cache_put(preset_cache):
    cache = preset_cache("case-I")
    call = price_with_cache(cache, VanillaContract(0.95, 0.5))
    put = price_with_cache(cache, VanillaContract(0.95, 0.5, "put"))
    assert put == pytest.approx(float(put_from_call(call, MARKET, 0.95, 0.5)), abs=1e-15)


def test_cache_out_of_range_falls_back(preset_cache):
    cache = preset_cache("case-I")
    c = VanillaContract(1.6, 1.0)
    with pytest.raises(CacheError):
        price_with_cache(cache, c)
    direct = price_call(CASE_I, MARKET, c)
    fft = carr_madan_price_at(carr_madan_prices(CASE_I, MARKET, 1.0), 1.6)
    assert abs(direct - fft) <= 2e-5


@pytest.mark.parametrize("name", ["case-I", "case-III", "case-V"])
def test_monotone_on_preset_grid(preset_cache, name):
    cfg = PRESETS[name]
    P = price_grid_with_cache(preset_cache(name), cfg.strikes, cfg.maturities)
    assert np.all(np.diff(P, axis=0) <= 1e-12)
    assert np.all(np.diff(P, axis=1) >= -1e-12)


def test_cache_needs_contracts():
    with pytest.raises(CacheError):
        build_cache(CASE_I, MARKET, [])


# --------------------------------------------------------------------------- #
# error accounting
# --------------------------------------------------------------------------- #

def test_error_report_case_i_slice():
    T = 1.0
    dom = select_truncation(CASE_I, MARKET, CASE_I.sigma, T, T)
    s = build_slice(0.0594, -9.2596, dom)
    eps = error_report(s, CASE_I, CASE_I.sigma, T, vg_variance_density(CASE_I, T))
    assert all(e >= 0 for e in eps)
    assert eps[1] <= 2e-5


def test_error_report_vanishing_payoff():
    # far out of the money c_BS and its fit are both ~0 on the support
    dom = (0.0027, 0.0405)
    s = build_slice(-40.0, -9.2596, dom)
    eps = error_report(s, CASE_I, CASE_I.sigma, 1.0, vg_variance_density(CASE_I, 1.0))
    assert max(eps) <= 1e-15


def test_error_report_sample_route_agrees_with_density():
    T = 1.0
    dom = select_truncation(CASE_I, MARKET, CASE_I.sigma, T, T)
    s = build_slice(0.0594, -9.2596, dom)
    pts = CASE_I.sigma**2 * representative_clock_values(CASE_I, [T], 20_000)[T]
    dens = error_report(s, CASE_I, CASE_I.sigma, T, vg_variance_density(CASE_I, T))
    samp = error_report(s, CASE_I, CASE_I.sigma, T, pts)
    assert abs(dens[1] - samp[1]) <= 1e-9


def test_error_report_needs_samples(worked_slice):
    with pytest.raises(PricingError):
        error_report(worked_slice, CASE_I, CASE_I.sigma, 1.0, np.array([]))


def test_quadrature_default_is_memoised():
    assert default_quadrature() is default_quadrature()
