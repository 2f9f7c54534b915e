from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_dft, vg_char_closed
from tcrational.clocks import DeterministicClock, MarketParams, VanillaContract
from tcrational.fourier import (
    FftGrid,
    FourierError,
    carr_madan_price_at,
    carr_madan_prices,
    char_fn_log_spot,
    fft_radix2,
)
from tcrational.pricer import black_scholes_call, price_call
from tcrational.storage import PRESETS

MARKET = MarketParams(1.0, 0.03, 0.01)
CASES = ["case-I", "case-III", "case-V"]


def test_delta_gives_flat_spectrum():
    x = np.zeros(16, complex)
    x[0] = 1.0
    assert np.allclose(fft_radix2(x), np.ones(16), atol=1e-15)


def test_single_tone_gives_delta():
    n, k = 64, 5
    x = np.exp(2j * np.pi * k * np.arange(n) / n)
    spec = fft_radix2(x)
    expect = np.zeros(n)
    expect[k] = n
    assert np.max(np.abs(spec - expect)) < 1e-12


def test_fft_against_naive_dft():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
    assert np.max(np.abs(fft_radix2(x) - naive_dft(x))) < 1e-10


@given(st.integers(0, 11), st.integers(0, 2**32 - 1))
def test_fft_round_trip_and_dft(p, seed):
    n = 2**p
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    back = fft_radix2(fft_radix2(x), inverse=True)
    assert np.max(np.abs(back - x)) <= 1e-12 * max(1.0, np.max(np.abs(x)))
    if n <= 512:
        assert np.max(np.abs(fft_radix2(x) - naive_dft(x))) < 1e-10


@pytest.mark.parametrize("n", [0, 3, 12, 1000])
def test_fft_size_error(n):
    with pytest.raises(FourierError):
        fft_radix2(np.ones(n))


@pytest.mark.parametrize("name", ["case-I", "case-II", "case-III", "case-IV", "case-V"])
def test_char_fn_normalization(name):
    m = PRESETS[name].model
    assert char_fn_log_spot(m, MARKET, 0.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    for T in (0.25, 1.0, 2.5):
        fwd = math.exp((0.03 - 0.01) * T)
        assert abs(char_fn_log_spot(m, MARKET, -1j, T) - fwd) <= 1e-10 * fwd


def test_char_fn_vg_closed_form():
    m = PRESETS["case-I"].model
    z = 1.3 - 2.5j
    w = -math.log(1 - m.nu * (m.theta + 0.5 * m.sigma**2)) / m.nu
    ref = np.exp(1j * z * (0.03 - 0.01 - w)) * vg_char_closed(m.sigma, m.nu, m.theta, z, 1.0)
    assert abs(char_fn_log_spot(m, MARKET, z, 1.0) - ref) <= 1e-13 * abs(ref)


def test_strip_violation():
    with pytest.raises(FourierError):
        carr_madan_prices(PRESETS["case-V"].model, MARKET, 1.0, alpha=10.0)


def test_grid_relation_and_power_of_two():
    g = carr_madan_prices(PRESETS["case-I"].model, MARKET, 1.0)
    assert g.N == 2048
    assert g.spacing * g.eta == pytest.approx(2 * math.pi / g.N, rel=1e-12)
    with pytest.raises(FourierError):
        carr_madan_prices(PRESETS["case-I"].model, MARKET, 1.0, N=1000)
    with pytest.raises(FourierError):
        FftGrid(1.5, 0.25, 4, np.arange(4.0), np.zeros(4))


def test_worked_example_fft_price():
    g = carr_madan_prices(PRESETS["case-I"].model, MARKET, 1.0)
    assert carr_madan_price_at(g, 1.1) == pytest.approx(0.021403243, abs=1e-8)


def test_black_scholes_limit():
    clock = DeterministicClock(0.2, theta=-0.02)
    g = carr_madan_prices(clock, MARKET, 1.0)
    k = np.exp(g.log_strikes)
    sel = (k > 0.3) & (k < 3.0)
    ref = np.array([black_scholes_call(1.0, K, 1.0, 0.03, 0.01, 0.2) for K in k[sel]])
    assert np.max(np.abs(g.prices[sel] - ref)) <= 1e-7


def test_heston_atm_matches_ra():
    m = PRESETS["case-III"].model
    fft = carr_madan_price_at(carr_madan_prices(m, MARKET, 1.0), 1.0)
    assert abs(fft - price_call(m, MARKET, VanillaContract(1.0, 1.0))) <= 8e-9


def test_price_at_node_and_span():
    g = carr_madan_prices(PRESETS["case-I"].model, MARKET, 1.0)
    j = g.N // 2 + 3
    assert carr_madan_price_at(g, math.exp(g.log_strikes[j])) == pytest.approx(g.prices[j], abs=1e-15)
    with pytest.raises(FourierError):
        carr_madan_price_at(g, math.exp(g.log_strikes[-1] + 1.0))


@pytest.mark.parametrize("name", CASES)
@pytest.mark.parametrize("T", [0.25, 1.0, 2.5])
def test_grid_refinement(name, T):
    m = PRESETS[name].model
    Ks = np.array(PRESETS[name].strikes)
    p = carr_madan_price_at(carr_madan_prices(m, MARKET, T), Ks)
    fine = carr_madan_price_at(carr_madan_prices(m, MARKET, T, eta=0.125, N=4096), Ks)
    assert np.max(np.abs(p - fine)) < 1e-8


@pytest.mark.parametrize("name", CASES)
def test_parity_implied_puts(name):
    m = PRESETS[name].model
    Ks = np.array(PRESETS[name].strikes)
    for T in PRESETS[name].maturities:
        call = carr_madan_price_at(carr_madan_prices(m, MARKET, T), Ks)
        put = call + Ks * math.exp(-0.03 * T) - math.exp(-0.01 * T)
        assert np.all(put >= -1e-8)
        assert np.all(np.diff(put) >= -1e-8)
