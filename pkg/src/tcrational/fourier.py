"""Damped-call FFT pricer, used as the reference route for comparisons.

The FFT itself is a hand-written iterative radix-2 Cooley-Tukey transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .clocks import ClockModel, MarketParams, ModelError, characteristic_exponent_X, omega


class FourierError(ValueError):
    """Size, strip or span violation in the FFT route."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(values, inverse: bool = False) -> np.ndarray:
    """Discrete Fourier transform ``sum_n x_n exp(-+2 pi i k n / N)``.

    The inverse includes the ``1/N`` factor, so ``fft_radix2(fft_radix2(x),
    inverse=True)`` returns ``x``.
    """
    x = np.asarray(values, dtype=complex)
    if x.ndim != 1:
        raise FourierError("expected a one-dimensional sequence")
    n = x.size
    if not _is_power_of_two(n):
        raise FourierError(f"length must be a power of two, got {n}")
    a = x[_bit_reverse_permutation(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(-1, size)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * tw
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        a = blocks.reshape(-1)
        size *= 2
    return a / n if inverse else a


def char_fn_log_spot(model: ClockModel, market: MarketParams, z, T: float):
    """``E[exp(i z log S_T)]`` under the mean-corrected model."""
    z = np.asarray(z, dtype=complex)
    drift = math.log(market.S0) + (market.r - market.q - omega(model)) * T
    try:
        phi = characteristic_exponent_X(model, z, T) * T
    except ModelError as exc:
        raise FourierError(f"characteristic function outside its strip: {exc}") from exc
    out = np.exp(1j * z * drift + phi)
    if not np.all(np.isfinite(out)):
        raise FourierError("characteristic function not finite; dampening too large")
    return out if out.ndim else out[()]


@dataclass(frozen=True)
class FftGrid:
    """Call prices on a uniform log-strike grid from one transform."""

    alpha: float
    eta: float
    N: int
    log_strikes: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        if not _is_power_of_two(self.N):
            raise FourierError("N must be a power of two")
        lam = self.log_strikes[1] - self.log_strikes[0]
        if not math.isclose(lam * self.eta, 2 * math.pi / self.N, rel_tol=1e-12):
            raise FourierError("grid violates lambda * eta = 2 pi / N")

    @property
    def spacing(self) -> float:
        return float(self.log_strikes[1] - self.log_strikes[0])


def carr_madan_prices(
    model: ClockModel,
    market: MarketParams,
    T: float,
    alpha: float = 1.5,
    eta: float = 0.25,
    N: int = 2048,
) -> FftGrid:
    """Dampened-call transform with Simpson weights, one FFT per maturity."""
    if not _is_power_of_two(N):
        raise FourierError(f"N must be a power of two, got {N}")
    lam = 2.0 * math.pi / (N * eta)
    b = 0.5 * N * lam
    j = np.arange(N)
    u = j * eta
    k = -b + lam * j
    psi = (
        math.exp(-market.r * T)
        * char_fn_log_spot(model, market, u - (alpha + 1.0) * 1j, T)
        / (alpha**2 + alpha - u**2 + 1j * (2.0 * alpha + 1.0) * u)
    )
    simpson = (3.0 + (-1.0) ** (j + 1)) / 3.0
    simpson[0] = 1.0 / 3.0
    spectrum = fft_radix2(np.exp(1j * b * u) * psi * simpson * eta)
    prices = np.exp(-alpha * k) / math.pi * spectrum.real
    return FftGrid(alpha, eta, N, k, prices)


def carr_madan_price_at(grid: FftGrid, K) -> np.ndarray | float:
    """Cubic interpolation of grid prices in log strike."""
    logk = np.log(np.asarray(K, dtype=float))
    if np.any(logk < grid.log_strikes[0]) or np.any(logk > grid.log_strikes[-1]):
        raise FourierError("strike outside the FFT grid span")
    out = _spline(grid)(logk)
    return float(out) if np.ndim(out) == 0 else out


def _spline(grid: FftGrid) -> CubicSpline:
    cached = grid.__dict__.get("_spline")
    if cached is None:
        cached = CubicSpline(grid.log_strikes, grid.prices)
        object.__setattr__(grid, "_spline", cached)
    return cached


def fft_surface(model: ClockModel, market: MarketParams, strikes, maturities, **kw) -> np.ndarray:
    """Call prices, shape ``(len(strikes), len(maturities))``."""
    strikes = np.asarray(strikes, dtype=float)
    out = np.empty((strikes.size, len(maturities)))
    for i, T in enumerate(maturities):
        out[:, i] = carr_madan_price_at(carr_madan_prices(model, market, float(T), **kw), strikes)
    return out
