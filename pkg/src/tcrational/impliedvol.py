"""Implied volatility from a table of one-dimensional rational approximations.

The normalized call ``c_iv(v, x)`` is inverted in total standard deviation
``v = sigma sqrt(T)`` for fixed log-moneyness ``x``.  For each of 105 values
of ``x`` in ``[-0.5, 0]`` a rational function of ``s = sqrt(c)`` approximates
the inverse on the admissible price region ``[c_LB(x), c_UB(x)]``.  Queries between
table nodes are interpolated across ``x`` with a local cubic; ``x > 0`` is
mapped onto ``x < 0`` through the put-call symmetry of ``c_iv``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import (
    NumericsError,
    RationalApproximant,
    extreme_grid,
    minimax_refine,
    rational_chebyshev_fit,
    std_normal_cdf,
)


class ImpliedVolError(ValueError):
    """Base class for implied-volatility failures."""


class DomainError(ImpliedVolError):
    """Log-moneyness outside the interval covered by the price bounds."""


class BracketError(ImpliedVolError):
    """Normalized price outside the no-arbitrage interval."""


class BoundsError(ImpliedVolError):
    """Normalized price outside ``[c_LB(x), c_UB(x)]``; use the oracle instead."""


class RangeError(ImpliedVolError):
    """``|x|`` exceeds the table range."""


class ArbitrageError(ImpliedVolError):
    """Option price outside the no-arbitrage interval of the contract."""


class TableFitError(ImpliedVolError):
    """No degree up to the maximum meets an entry's error bound."""

    def __init__(self, x: float, error: float, bound: float):
        super().__init__(f"no rational fit meets the bound {bound:.3g} at x={x:.6g} (best {error:.3g})")
        self.x = x
        self.error = error
        self.bound = bound


X_MIN = -0.5
FINE_CUTOFF = -0.0075
BOUND_FINE = 8.55e-7
BOUND_COARSE = 5.54e-5

_LB_NUM = (0.0, -0.00424532412773, 0.00099075112125)
_LB_DEN = (1.0, 0.26674393279214, 0.03360553011959)
_UB_NUM = (0.38292495908775, 0.31382372544666, 0.07116503261172)
_UB_DEN = (1.0, 0.01380361926221, 0.11791124749938)


def c_iv(v, x):
    """Normalized call ``N(x/v + v/2) - e^-x N(x/v - v/2)`` for ``v > 0``."""
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x / v
    out = std_normal_cdf(d + 0.5 * v) - np.exp(-x) * std_normal_cdf(d - 0.5 * v)
    return out if out.ndim else float(out)


def _dc_dv(v, x):
    # vega of c_iv: phi(x/v + v/2)
    z = x / v + 0.5 * v
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _quad(coef, x):
    return coef[0] + x * (coef[1] + x * coef[2])


def li_bounds(x):
    """Lower and upper normalized-price bounds for ``-0.5 <= x <= 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(xa)) or np.any(xa < X_MIN) or np.any(xa > 0.0):
        raise DomainError(f"li_bounds needs -0.5 <= x <= 0, got {x}")
    lb = _quad(_LB_NUM, xa) / _quad(_LB_DEN, xa)
    ub = _quad(_UB_NUM, xa) / _quad(_UB_DEN, xa)
    if xa.ndim == 0:
        return float(lb), float(ub)
    return lb, ub


def _arbitrage_limits(x):
    return np.maximum(1.0 - np.exp(-np.asarray(x, dtype=float)), 0.0), 1.0


def iv_oracle_array(c, x, tol: float = 1e-12) -> np.ndarray:
    """Vectorized oracle; ``c`` and ``x`` broadcast.

    Bisection on ``v`` runs until the bracket collapses to a few ulps, which
    is far below ``tol`` in price, then one Newton step is kept only where it
    lowers the residual.
    """
    c, x = np.broadcast_arrays(np.asarray(c, dtype=float), np.asarray(x, dtype=float))
    c = c.astype(float).ravel()
    x = x.astype(float).ravel()
    lo_lim, _ = _arbitrage_limits(x)
    bad = ~(np.isfinite(c) & np.isfinite(x) & (c > lo_lim) & (c < 1.0))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise BracketError(
            f"price {c[i]:.17g} outside the no-arbitrage interval ({lo_lim[i]:.17g}, 1) at x={x[i]:.6g}"
        )
    lo = np.zeros_like(c)
    hi = np.ones_like(c)
    while True:
        short = c_iv(hi, x) < c
        if not np.any(short):
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2.0 * hi, hi)
        if np.max(hi) > 1e3:
            raise BracketError("no finite volatility reproduces the price")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        above = c_iv(mid, x) > c
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= 4.0 * np.spacing(hi)):
            break
    v = 0.5 * (lo + hi)
    res = c_iv(v, x) - c
    vega = _dc_dv(v, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(vega > 0.0, res / vega, 0.0)
    cand = v - step
    inside = (cand >= lo) & (cand <= hi)
    better = inside & (np.abs(c_iv(np.where(inside, cand, v), x) - c) < np.abs(res))
    v = np.where(better, cand, v)
    if np.any(np.abs(c_iv(v, x) - c) > tol):
        i = int(np.argmax(np.abs(c_iv(v, x) - c)))
        raise BracketError(f"oracle did not reach |dc| <= {tol:g} at c={c[i]:.17g}, x={x[i]:.6g}")
    return v


def iv_oracle(c: float, x: float, tol: float = 1e-12) -> float:
    """Total standard deviation ``v`` with ``c_iv(v, x) = c``; the ground truth."""
    return float(iv_oracle_array(c, x, tol)[0])


def table_x_grid() -> np.ndarray:
    """The 105 table nodes, strictly decreasing from 0 to -0.5."""
    fine = -0.0025 * np.arange(9)
    coarse = -0.005 * np.arange(5, 101)
    return np.concatenate((fine, coarse))


def error_bound(x: float) -> float:
    return BOUND_FINE if x <= FINE_CUTOFF + 1e-12 else BOUND_COARSE


@dataclass(frozen=True)
class IVEntry:
    """One table slice: ``v ~ R(sqrt(c))`` at fixed ``x``."""

    x: float
    degree: int
    approximant: RationalApproximant
    bounds: tuple[float, float]
    max_error: float

    @property
    def s_domain(self) -> tuple[float, float]:
        return tuple(self.approximant.domain)


@dataclass(frozen=True)
class IVTable:
    entries: tuple[IVEntry, ...]

    def __post_init__(self):
        xs = np.array([e.x for e in self.entries])
        if xs.size != 105:
            raise ImpliedVolError(f"an IV table has 105 entries, got {xs.size}")
        if not np.all(np.diff(xs) < 0.0) or xs[0] != 0.0 or not math.isclose(xs[-1], X_MIN):
            raise ImpliedVolError("table x values must decrease strictly from 0 to -0.5")
        object.__setattr__(self, "_xs", xs)
        object.__setattr__(self, "_packed", _pack(self.entries))

    @property
    def x_grid(self) -> np.ndarray:
        return self._xs


def _entry_target(x: float):
    floor = max(1.0 - math.exp(-x), 0.0)

    def f(s):
        c = np.asarray(s, dtype=float) ** 2
        out = np.zeros_like(c)
        # v -> 0 is the exact limit at the arbitrage floor
        live = c > floor
        out[live] = iv_oracle_array(c[live], x)
        return out

    return f


def _check_grid(x: float, lb: float, ub: float, n: int = 2048) -> np.ndarray:
    s = extreme_grid((math.sqrt(lb), math.sqrt(ub)), n)
    # the oracle needs c strictly inside the arbitrage interval
    return s[s * s > max(1.0 - math.exp(-x), 0.0)]


def _fit_error(approx: RationalApproximant, f, s: np.ndarray) -> float:
    vals = approx(s)
    if not np.all(np.isfinite(vals)):
        return math.inf
    return float(np.max(np.abs(vals - f(s))))


def _upper_pad(x: float, spread: float) -> float:
    # neighbouring nodes reach slightly higher prices; the lower end is left
    # alone because widening it toward c = 0 wrecks fits near x = 0
    xs = np.linspace(min(x + spread, 0.0), x, 21)
    return float(np.max(li_bounds(xs)[1]))


def build_entry(x: float, degrees: Sequence[int] = (7, 8, 9), refine_iters: int = 6) -> IVEntry:
    """Fit one table slice.

    Every degree in ``degrees`` is tried and the most accurate fit on the bounded
    region is kept; it must meet the region's bound.
    """
    lb, ub = li_bounds(x)
    bound = error_bound(x)
    f = _entry_target(x)
    s_check = _check_grid(x, lb, ub)
    domain = (math.sqrt(lb), math.sqrt(_upper_pad(x, 0.0125)))
    best: Optional[tuple[float, int, RationalApproximant]] = None
    for m in degrees:
        try:
            approx = rational_chebyshev_fit(f, domain, m, n_samples=max(64, 8 * m))
            approx = minimax_refine(approx, f, max_iters=refine_iters)
        except NumericsError:
            continue
        err = _fit_error(approx, f, s_check)
        if best is None or err < best[0]:
            best = (err, m, approx)
    if best is None or not best[0] <= bound:
        raise TableFitError(float(x), best[0] if best else math.inf, bound)
    return IVEntry(float(x), best[1], best[2], (lb, ub), best[0])


def build_iv_table(workers: int = 4) -> IVTable:
    """Build all 105 entries; output does not depend on ``workers``."""
    xs = [float(v) for v in table_x_grid()]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build_entry, xs))
    else:
        entries = [build_entry(x) for x in xs]
    return IVTable(tuple(entries))


# Packed coefficient arrays for vectorized evaluation of many entries at once.
@dataclass(frozen=True)
class _Packed:
    num: np.ndarray  # (n_entries, max_degree + 1)
    den: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _pack(entries) -> _Packed:
    width = max(e.degree for e in entries) + 1
    num = np.zeros((len(entries), width))
    den = np.zeros((len(entries), width))
    lo = np.empty(len(entries))
    hi = np.empty(len(entries))
    for i, e in enumerate(entries):
        a = e.approximant
        num[i, : a.numerator_cheb.size] = a.numerator_cheb
        den[i, : a.denominator_cheb.size] = a.denominator_cheb
        lo[i], hi[i] = a.domain
    return _Packed(num, den, lo, hi)


def _clenshaw_rows(coef: np.ndarray, y: np.ndarray) -> np.ndarray:
    b1 = np.zeros_like(y)
    b2 = np.zeros_like(y)
    for k in range(coef.shape[1] - 1, 0, -1):
        b1, b2 = coef[:, k] + 2.0 * y * b1 - b2, b1
    return coef[:, 0] + y * b1 - b2


def _eval_entries(table: IVTable, idx: np.ndarray, s: np.ndarray) -> np.ndarray:
    p = table._packed
    lo, hi = p.lo[idx], p.hi[idx]
    y = (2.0 * s - (lo + hi)) / (hi - lo)
    return _clenshaw_rows(p.num[idx], y) / _clenshaw_rows(p.den[idx], y)


def _stencil(xs: np.ndarray, x: np.ndarray) -> np.ndarray:
    # four nodes around each query; xs is decreasing
    n = xs.size
    j = np.searchsorted(-xs, -x, side="right") - 1  # xs[j] >= x > xs[j+1]
    j = np.clip(j, 0, n - 2)
    start = np.clip(j - 1, 0, n - 4)
    # keep the coarse-bound region clear of the fine nodes near x = 0
    first = int(np.argmin(np.abs(xs - FINE_CUTOFF)))
    start = np.where(x <= FINE_CUTOFF, np.maximum(start, first), start)
    return start[:, None] + np.arange(4)[None, :]


def _reduce(c, x):
    """Map ``x > 0`` onto ``-x`` via the symmetry of ``c_iv``."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = x > 0.0
    ex = np.exp(np.where(pos, x, 0.0))
    return np.where(pos, ex * c + 1.0 - ex, c), np.where(pos, -x, x)


def in_table_bounds(c, x) -> np.ndarray:
    """Mask of queries the table can answer (after symmetry reduction)."""
    c, x = np.broadcast_arrays(np.asarray(c, dtype=float), np.asarray(x, dtype=float))
    cr, xr = _reduce(c, x)
    ok = np.isfinite(cr) & np.isfinite(xr) & (xr >= X_MIN)
    lb, ub = li_bounds(np.where(ok, xr, 0.0))
    return ok & (cr >= lb) & (cr <= ub)


def implied_v_array(table: IVTable, c, x) -> np.ndarray:
    """Vectorized ``implied_v``; raises on the first out-of-range query."""
    c, x = np.broadcast_arrays(np.asarray(c, dtype=float), np.asarray(x, dtype=float))
    shape = c.shape
    c = c.ravel()
    x = x.ravel()
    if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 0.5):
        raise RangeError(f"|x| must not exceed 0.5, got {x[np.argmax(np.abs(np.nan_to_num(x, nan=np.inf)))]:.6g}")
    cr, xr = _reduce(c, x)
    lb, ub = li_bounds(xr)
    out = ~(np.isfinite(cr) & (cr >= lb) & (cr <= ub))
    if np.any(out):
        i = int(np.argmax(out))
        raise BoundsError(
            f"normalized price {cr[i]:.6g} outside the table bounds [{lb[i]:.6g}, {ub[i]:.6g}] at x={xr[i]:.6g}"
        )
    s = np.sqrt(cr)
    xs = table.x_grid
    idx = _stencil(xs, xr)
    nodes = xs[idx]
    vals = np.stack([_eval_entries(table, idx[:, k], s) for k in range(4)], axis=1)
    # Lagrange weights; exact at a node
    w = np.ones_like(nodes)
    for k in range(4):
        for m in range(4):
            if m != k:
                w[:, k] *= (xr - nodes[:, m]) / (nodes[:, k] - nodes[:, m])
    v = np.sum(w * vals, axis=1)
    hit = np.isclose(nodes, xr[:, None], rtol=0.0, atol=1e-15)
    rows = np.any(hit, axis=1)
    if np.any(rows):
        v[rows] = vals[rows][hit[rows]]
    return v.reshape(shape)


def implied_v(table: IVTable, c: float, x: float) -> float:
    """Total implied standard deviation for normalized price ``c`` at ``x``."""
    return float(implied_v_array(table, c, x).reshape(-1)[0])


def normalize(price, S0, K, T, r, q):
    """``(c, x)`` with ``price = S0 e^-qT c_iv(sigma sqrt T, x)``."""
    x = np.log(np.asarray(S0, dtype=float) * np.exp((np.asarray(r) - np.asarray(q)) * T) / K)
    c = np.asarray(price, dtype=float) / (np.asarray(S0, dtype=float) * np.exp(-np.asarray(q) * T))
    return c, x


def _check_arbitrage(c, x):
    lo, _ = _arbitrage_limits(x)
    bad = ~(np.isfinite(c) & (c > lo) & (c < 1.0))
    return bad


def implied_vol(table: IVTable, price: float, S0: float, K: float, T: float, r: float, q: float) -> float:
    """Black-Scholes implied volatility of a call price via the table."""
    if not (S0 > 0 and K > 0 and T > 0):
        raise ImpliedVolError("S0, K and T must be positive")
    c, x = normalize(price, S0, K, T, r, q)
    if _check_arbitrage(c, x):
        raise ArbitrageError(f"price {price!r} outside the no-arbitrage interval for K={K}, T={T}")
    return implied_v(table, float(c), float(x)) / math.sqrt(T)


def implied_vol_points(table: IVTable, prices, S0: float, K, T, r: float, q: float):
    """Implied vols for matching arrays of call prices, strikes and maturities.

    Returns ``(sigma, fallback, invalid)``.  Cells outside the price bounds or the
    table's ``x`` range are solved with the oracle and marked in ``fallback``;
    cells violating no-arbitrage (or with nonpositive K, T) are NaN and
    marked in ``invalid``.
    """
    prices, K, T = np.broadcast_arrays(
        np.asarray(prices, dtype=float), np.asarray(K, dtype=float), np.asarray(T, dtype=float)
    )
    sane = (K > 0) & (T > 0) & np.isfinite(K) & np.isfinite(T)
    Ks = np.where(sane, K, 1.0)
    Ts = np.where(sane, T, 1.0)
    c, x = normalize(prices, S0, Ks, Ts, r, q)
    invalid = ~sane | _check_arbitrage(c, x)
    usable = ~invalid & (np.abs(x) <= 0.5)
    table_ok = np.zeros(c.shape, dtype=bool)
    table_ok[usable] = in_table_bounds(c[usable], x[usable])
    v = np.full(c.shape, np.nan)
    if np.any(table_ok):
        v[table_ok] = implied_v_array(table, c[table_ok], x[table_ok])
    fallback = ~invalid & ~table_ok
    if np.any(fallback):
        v[fallback] = iv_oracle_array(c[fallback], x[fallback])
    return v / np.sqrt(Ts), fallback, invalid


def implied_vol_surface(table: IVTable, prices, S0: float, strikes, maturities, r: float, q: float):
    """:func:`implied_vol_points` over a ``(len(strikes), len(maturities))`` grid."""
    K = np.asarray(strikes, dtype=float)[:, None]
    T = np.asarray(maturities, dtype=float)[None, :]
    return implied_vol_points(table, prices, S0, K, T, r, q)
