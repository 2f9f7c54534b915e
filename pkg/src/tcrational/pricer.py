"""Option pricing through a rational approximation of the normalized
Black-Scholes function and the Laplace transform of the clock.

For a fixed adjusted log-moneyness ``x`` and market parameter ``mu`` the map
``v -> c_BS(v; x, mu)`` is fitted on a truncation interval ``[a, b]`` by a
rational function, split into partial fractions, and each simple pole is
written as a Laplace integral.  The expectation over the clock then needs
only the clock's Laplace transform at quadrature nodes.

Workflow
--------
* :func:`build_slice` fits one ``(x, mu)`` on a given interval.
* :func:`price_call` picks an interval and prices a single contract.
* :func:`build_cache` fits slices on an ``x`` grid covering a contract set;
  :func:`price_with_cache` then prices by spline interpolation over ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from .clocks import (
    ClockModel,
    DeterministicClock,
    Heston,
    MarketParams,
    VanillaContract,
    VarianceGamma,
    adjusted_log_moneyness,
    clock_moments,
    clock_quantile,
    laplace_transform,
    log_laplace_transform,
    model_theta_sigma,
    normalized_mu,
    omega,
    representative_clock_values,
    transform_quantiles,
)
from .numerics import (
    NumericsError,
    PartialFractionForm,
    QuadratureRule,
    SingularSystemError,
    extreme_grid,
    gauss_legendre,
    minimax_refine,
    partial_fractions,
    rational_chebyshev_fit,
    std_normal_cdf,
)


class PricingError(NumericsError):
    """Numerical failure in the pricing pipeline."""


class SliceRejectedError(PricingError):
    """No admissible rational fit was found for a slice."""


class CacheError(PricingError):
    """Cache construction or lookup failure."""


# --------------------------------------------------------------------------- #
# Black-Scholes building blocks
# --------------------------------------------------------------------------- #

def c_bs(v, x, mu):
    """Normalized Black-Scholes call in total variance ``v``.

    ``exp(mu v) N(x/sqrt(v) + (mu + 1/2) sqrt(v))
    - exp(-x) N(x/sqrt(v) + (mu - 1/2) sqrt(v))``, with the ``v = 0`` value
    ``max(1 - exp(-x), 0)`` by continuity.
    """
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = v > 0
    sv = np.sqrt(np.where(pos, v, 1.0))
    d = x / sv
    val = np.exp(mu * v) * std_normal_cdf(d + (mu + 0.5) * sv) - np.exp(-x) * std_normal_cdf(
        d + (mu - 0.5) * sv
    )
    out = np.where(pos, val, np.maximum(-np.expm1(-x), 0.0))
    return float(out) if out.ndim == 0 else out


def black_scholes_call(S0, K, T, r, q, sigma):
    """Black-Scholes call price; ``sigma = 0`` gives the discounted intrinsic."""
    S0, K, T, sigma = (np.asarray(a, dtype=float) for a in (S0, K, T, sigma))
    fwd = S0 * np.exp(-q * T)
    disc = K * np.exp(-r * T)
    sd = sigma * np.sqrt(T)
    safe = np.where(sd > 0, sd, 1.0)
    d1 = (np.log(fwd / disc) + 0.5 * sd**2) / safe
    val = fwd * std_normal_cdf(d1) - disc * std_normal_cdf(d1 - safe)
    out = np.where(sd > 0, val, np.maximum(fwd - disc, 0.0))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- #
# Slices
# --------------------------------------------------------------------------- #

RAY_ANGLES = (math.pi / 4, math.pi / 3, 5 * math.pi / 12, math.pi / 2)


@dataclass(frozen=True)
class DegreePolicy:
    """How slices are fitted.

    Degrees run from ``start`` to ``max_degree`` (``forced`` pins one).
    Escalation stops once a fit without correction or rotated poles is within
    ``target``; any fit within ``threshold`` is admissible.  ``ray_angles``
    lists the rotated Laplace rays available to poles with nonnegative real
    part; an empty tuple leaves every such pole to the ``exp(-v)`` correction.
    """

    start: int = 6
    max_degree: int = 8
    threshold: float = 1e-6
    target: float = 1e-9
    refine_iters: int = 6
    correction_degree: int = 7
    max_condition: float = 1e15
    forced: Optional[int] = None
    ray_angles: tuple[float, ...] = RAY_ANGLES
    decay_units: float = 25.0

    def degrees(self) -> tuple[int, ...]:
        if self.forced is not None:
            return (self.forced,)
        return tuple(range(self.start, self.max_degree + 1))


DEFAULT_POLICY = DegreePolicy()

_QUAD_CACHE: dict[tuple, QuadratureRule] = {}

TAIL_NODES = 64
TAIL_SPAN = 12.0


def default_quadrature(
    L: int = 500, c: float = 0.0, d: float = 7000.0, tail: int = TAIL_NODES, span: float = TAIL_SPAN
) -> QuadratureRule:
    """Gauss-Legendre rule on ``[c, d]`` plus a log-spaced tail past ``d`` (memoised).

    The tail matters for poles close to the origin, whose Laplace integrands
    ``exp(B t) L(sigma^2 t)`` decay only algebraically; ``tail=0`` gives the
    plain rule.
    """
    key = (int(L), float(c), float(d), int(tail), float(span))
    if key not in _QUAD_CACHE:
        rule = gauss_legendre(int(L), float(c), float(d))
        _QUAD_CACHE[key] = rule.with_log_tail(int(tail), float(span)) if tail else rule
    return _QUAD_CACHE[key]


@dataclass(frozen=True)
class PricedSlice:
    """Everything needed to price at one ``(x, mu)``.

    ``kernel_weights[k] = w_k * sum_j A_j exp(B_j x_k)`` over the real-axis
    poles.  ``rotated`` holds ``(phi, K_phi)`` pairs for poles integrated
    along the ray ``t e^{i phi}``; their contribution is
    ``Re sum_k K_phi[k] L(sigma^2 x_k e^{i phi})``.
    """

    x: float
    mu: float
    domain: tuple[float, float]
    pf: PartialFractionForm
    quad: QuadratureRule
    kernel_weights: np.ndarray = field(repr=False)
    fit_error: float
    degree: int
    threshold: float
    rotated: tuple[tuple[float, np.ndarray], ...] = field(default=(), repr=False)

    def __post_init__(self):
        kw = np.asarray(self.kernel_weights, dtype=float)
        if kw.shape != (self.quad.count,):
            raise PricingError("kernel weights do not match the quadrature rule")
        kw.setflags(write=False)
        object.__setattr__(self, "kernel_weights", kw)

    @property
    def constant(self) -> float:
        return self.pf.constant

    @property
    def correction_coefficients(self) -> np.ndarray:
        return self.pf.correction_monomials()

    @property
    def angles(self) -> tuple[float, ...]:
        return tuple(phi for phi, _ in self.rotated)

    def approximate(self, v) -> np.ndarray:
        """The quadrature form of ``c_BS`` at deterministic ``v``."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        nodes = self.quad.abscissas
        out = self.pf.constant + np.exp(-np.multiply.outer(v, nodes)) @ self.kernel_weights
        for phi, K in self.rotated:
            out = out + (np.exp(-np.multiply.outer(v, nodes * np.exp(1j * phi))) @ K).real
        c = self.correction_coefficients
        if c.size:
            out = out + np.polynomial.polynomial.polyval(np.exp(-v), c)
        return out


def slice_kernels(pf: PartialFractionForm, quad: QuadratureRule):
    """Real-axis kernel and the combined kernel for each rotated ray."""
    x, w = quad.abscissas, quad.weights
    real = pf.angles == 0
    if np.any(real):
        kw = w * (np.exp(np.multiply.outer(x, pf.poles[real])) @ pf.residues[real]).real
    else:
        kw = np.zeros(quad.count)
    rotated = []
    for phi in sorted({abs(a) for a in pf.angles if a != 0}):
        K = np.zeros(quad.count, dtype=complex)
        for sign in (1.0, -1.0):
            sel = pf.angles == sign * phi
            if not np.any(sel):
                continue
            rot = np.exp(1j * sign * phi)
            part = w * rot * (np.exp(np.multiply.outer(x * rot, pf.poles[sel])) @ pf.residues[sel])
            # rays below the axis see the conjugate transform
            K += part if sign > 0 else np.conj(part)
        rotated.append((phi, K))
    return kw, tuple(rotated)


def _grid_error(pf: PartialFractionForm, f, domain, n: int = 512) -> float:
    v = extreme_grid(domain, n)
    return float(np.max(np.abs(pf(v) - f(v))))


def _make_slice(x, mu, domain, pf, quad, err, m, threshold) -> PricedSlice:
    kw, rot = slice_kernels(pf, quad)
    return PricedSlice(float(x), float(mu), (float(domain[0]), float(domain[1])), pf, quad, kw, err, m, threshold, rot)


def _is_clean(s: PricedSlice) -> bool:
    return s.pf.correction is None and not s.rotated


def slice_candidates(
    x: float,
    mu: float,
    domain: Sequence[float],
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
) -> list[PricedSlice]:
    """All admissible slices for ``(x, mu)`` on ``domain``.

    For each degree both the raw and the refined rational fit are tried, with
    and without rotated rays.  A candidate is admissible when its grid error
    is within the threshold and its quadrature form agrees with the partial
    fractions to 1e-8 on a 64-point grid.
    """
    a, b = float(domain[0]), float(domain[1])
    if not 0.0 < a < b:
        raise PricingError(f"truncation interval must satisfy 0 < a < b, got {domain}")
    quad = quad or default_quadrature()
    min_decay = policy.decay_units / quad.interval[1]
    fallback_decay = policy.decay_units / float(quad.abscissas.max()) if quad.tail_nodes else None

    def f(v):
        return c_bs(v, x, mu)

    check = extreme_grid((a, b), 64)
    size = float(np.max(np.abs(f(extreme_grid((a, b), 512)))))
    if size <= 1e-3 * policy.target:
        # far out of the money: zero is already a fit within target
        pf = PartialFractionForm(0.0, np.zeros(0, complex), np.zeros(0, complex))
        return [_make_slice(x, mu, (a, b), pf, quad, size, 0, policy.threshold)]
    out: list[PricedSlice] = []
    degrees = policy.degrees()
    # very smooth targets (deep in or out of the money) make the higher-degree
    # systems singular; lower degrees are tried only if all of those fail
    fallback = tuple(range(min(degrees) - 1, 1, -1)) if policy.forced is None else ()
    for m in degrees + fallback:
        if m in fallback and out:
            break
        try:
            raw = rational_chebyshev_fit(f, (a, b), m, max_condition=policy.max_condition)
        except SingularSystemError:
            continue
        fits = [raw]
        if policy.refine_iters:
            refined = minimax_refine(raw, f, max_iters=policy.refine_iters)
            if refined is not raw:
                fits.insert(0, refined)
        for approx in fits:
            if approx.denominator_sign_change():
                continue
            variants = [()] + ([policy.ray_angles] if policy.ray_angles else [])
            for rays in variants:
                try:
                    pf = partial_fractions(approx, policy.correction_degree, rays, min_decay, fallback_decay)
                except NumericsError:
                    continue
                if rays and not pf.rotated:
                    continue
                err = _grid_error(pf, f, (a, b))
                if not np.isfinite(err) or err > policy.threshold:
                    continue
                s = _make_slice(x, mu, (a, b), pf, quad, err, m, policy.threshold)
                if np.max(np.abs(s.approximate(check) - pf(check))) > 1e-8:
                    continue
                out.append(s)
        if any(_is_clean(s) and s.fit_error <= policy.target for s in out):
            break
    return out


def build_slice(
    x: float,
    mu: float,
    domain: Sequence[float],
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
) -> PricedSlice:
    """Fit ``c_BS(.; x, mu)`` on ``domain`` and assemble its pricing kernel.

    Returns the admissible candidate with the smallest grid error.
    """
    cands = slice_candidates(x, mu, domain, policy, quad)
    if not cands:
        raise SliceRejectedError(f"no rational fit within {policy.threshold:g} for x={x:.6g}")
    return min(cands, key=lambda s: (s.fit_error, not _is_clean(s)))


# --------------------------------------------------------------------------- #
# Expectations
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TransformVectors:
    """Clock transform values a slice is contracted against for one maturity.

    ``nodes[k] = E[exp(-V x_k)]``, ``rays[phi][k] = E[exp(-V x_k e^{i phi})]``
    and ``powers[i] = E[exp(-i V)]`` with ``V = sigma^2 Z_T``.
    """

    nodes: np.ndarray
    rays: dict
    powers: np.ndarray


def transform_vectors(
    model: ClockModel,
    sigma: float,
    T: float,
    quad: QuadratureRule,
    angles: Iterable[float] = RAY_ANGLES,
    n_powers: int = 8,
) -> TransformVectors:
    s2 = sigma**2
    nodes = np.asarray(laplace_transform(model, s2 * quad.abscissas, T), dtype=float)
    rays = {
        float(phi): np.asarray(laplace_transform(model, s2 * quad.abscissas * np.exp(1j * phi), T))
        for phi in angles
    }
    powers = np.asarray(laplace_transform(model, s2 * np.arange(n_powers, dtype=float), T), dtype=float)
    return TransformVectors(nodes, rays, powers)


def empirical_vectors(
    v: np.ndarray,
    quad: QuadratureRule,
    angles: Iterable[float] = RAY_ANGLES,
    n_powers: int = 8,
) -> TransformVectors:
    """The same vectors with the expectation replaced by a sample mean over ``v``."""
    v = np.asarray(v, dtype=float)
    nodes = np.exp(-np.multiply.outer(quad.abscissas, v)).mean(axis=1)
    rays = {
        float(phi): np.exp(-np.multiply.outer(quad.abscissas * np.exp(1j * phi), v)).mean(axis=1)
        for phi in angles
    }
    powers = np.exp(-np.multiply.outer(np.arange(n_powers), v)).mean(axis=1)
    return TransformVectors(nodes, rays, powers)


def _expectation(s: PricedSlice, vec: TransformVectors) -> float:
    total = s.constant + s.kernel_weights @ vec.nodes
    for phi, K in s.rotated:
        total += (K @ vec.rays[phi]).real
    c = s.correction_coefficients
    if c.size:
        if c.size > vec.powers.size:
            raise PricingError("transform vectors carry too few powers for the correction")
        total += c @ vec.powers[: c.size]
    return float(total)


def price_expectation(
    slice_: PricedSlice,
    model: ClockModel,
    sigma: float,
    T: float,
    vectors: Optional[TransformVectors] = None,
) -> float:
    """Approximate ``E[c_BS(sigma^2 Z_T; x, mu)]``.

    ``A0 + sum_k kernel_weights[k] L(sigma^2 x_k, T)`` plus the rotated-ray
    terms and ``sum_i c_i L(sigma^2 i, T)`` for the correction.
    """
    if vectors is None:
        n_pow = max(8, slice_.correction_coefficients.size)
        vectors = transform_vectors(model, sigma, T, slice_.quad, slice_.angles, n_pow)
    return _expectation(slice_, vectors)


# --------------------------------------------------------------------------- #
# Truncation
# --------------------------------------------------------------------------- #

A_FACTORS = (1.0, 0.5, 2.0, 0.25, 3.0)
B_FACTORS = (1.0, 1.5)


def truncation_candidates(a0: float, b0: float) -> list[tuple[float, float]]:
    """Ten ``(a, b)`` pairs scaled from a base quantile pair (base first)."""
    return [(fa * a0, fb * b0) for fb in B_FACTORS for fa in A_FACTORS if fa * a0 < fb * b0]


def _quantile_pair(model: ClockModel, sigma: float, T_min: float, T_max: float, seed: int) -> tuple[float, float]:
    if isinstance(model, (VarianceGamma, DeterministicClock)):
        a = clock_quantile(model, T_min, 0.001)
        b = clock_quantile(model, T_max, 0.999)
    else:
        # inverted transform: exact up to the contour rule, and no sampling noise
        a = float(transform_quantiles(model, T_min, np.array([0.001]))[0])
        b = float(transform_quantiles(model, T_max, np.array([0.999]))[0])
    return sigma**2 * a, sigma**2 * b


def _widen(a: float, b: float) -> tuple[float, float]:
    # deterministic or nearly deterministic clocks collapse the interval
    mid = 0.5 * (a + b)
    half = max(0.5 * (b - a), 1e-6 * max(mid, 1e-12), 1e-10)
    return max(mid - half, 0.5 * mid), mid + half


@dataclass
class ScoringSet:
    """Representative clock values and their empirical transform vectors,
    keyed by maturity."""

    values: dict
    vectors: dict


def scoring_set(
    model: ClockModel,
    sigma: float,
    maturities: Sequence[float],
    quad: QuadratureRule,
    policy: DegreePolicy = DEFAULT_POLICY,
    *,
    seed: int = 0,
    n_points: int = 4000,
) -> ScoringSet:
    pts = representative_clock_values(model, maturities, n_points, seed=seed, n_paths=0)
    values = {t: sigma**2 * z for t, z in pts.items()}
    n_pow = policy.correction_degree + 1
    vectors = {t: empirical_vectors(v, quad, policy.ray_angles, n_pow) for t, v in values.items()}
    return ScoringSet(values, vectors)


def slice_score(s: PricedSlice, scoring: ScoringSet, maturities: Iterable[float]) -> float:
    """Estimated pricing error of a slice, maximised over ``maturities``.

    Per maturity: the absolute sums of the signed region errors of the
    partial-fraction form plus the gap between its quadrature form and the
    partial fractions, both under the representative clock values.
    """
    a, b = s.domain
    worst = 0.0
    for t in maturities:
        v = scoring.values[t]
        pfv = s.pf(v)
        d = pfv - c_bs(v, s.x, s.mu)
        lo, hi = v < a, v > b
        mid = ~(lo | hi)
        region = (abs(d[lo].sum()) + abs(d[mid].sum()) + abs(d[hi].sum())) / v.size
        quad_gap = abs(_expectation(s, scoring.vectors[t]) - pfv.mean())
        worst = max(worst, region + quad_gap)
    return worst


def search_slice(
    x: float,
    mu: float,
    base: tuple[float, float],
    scoring: ScoringSet,
    maturities: Sequence[float],
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
    early_exit: float = 1e-10,
) -> tuple[Optional[PricedSlice], float]:
    """Best slice over the ten truncation candidates, with its score.

    Returns ``(None, inf)`` when no candidate scores within the threshold.
    """
    best, best_score = None, math.inf
    for dom in truncation_candidates(*base):
        if not 0 < dom[0] < dom[1]:
            continue
        for s in slice_candidates(x, mu, dom, policy, quad):
            sc = slice_score(s, scoring, maturities)
            if sc < best_score:
                best, best_score = s, sc
        if best_score <= early_exit:
            break
    if best is None or best_score > policy.threshold:
        return None, math.inf
    return best, best_score


def select_truncation(
    model: ClockModel,
    market: MarketParams,
    sigma: float,
    T_min: float,
    T_max: float,
    *,
    method: str = "quantile",
    x: Optional[float] = None,
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Truncation interval for ``sigma^2 Z_T`` over ``T in [T_min, T_max]``.

    ``method="quantile"``: 0.1% quantile at ``T_min`` and 99.9% quantile at
    ``T_max``.  ``method="search"``: the best of the ten scaled candidates for
    the given ``x``.
    """
    if not 0 < T_min <= T_max:
        raise PricingError("need 0 < T_min <= T_max")
    a, b = _quantile_pair(model, sigma, T_min, T_max, seed)
    if not b - a > 1e-9 * max(b, 1e-300):
        a, b = _widen(a, b)
    if method == "quantile":
        return a, b
    if method != "search":
        raise PricingError(f"unknown truncation method {method!r}")
    if x is None:
        raise PricingError("the candidate search needs the log-moneyness x")
    quad = quad or default_quadrature()
    mats = sorted({float(T_min), float(T_max)})
    scoring = scoring_set(model, sigma, mats, quad, policy, seed=seed)
    s, _ = search_slice(x, normalized_mu(model), (a, b), scoring, mats, policy, quad)
    if s is None:
        raise SliceRejectedError(f"no truncation candidate admissible for x={x:.6g}")
    return s.domain


# --------------------------------------------------------------------------- #
# Direct pricing
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PriceRecord:
    price: float
    mu: float
    x: float
    domain: tuple[float, float]
    fit_error: float
    degree: int


def _prefactor(model: ClockModel, market: MarketParams, T) -> np.ndarray:
    return market.S0 * np.exp(-(market.q + omega(model)) * np.asarray(T, dtype=float))


def price_call_record(
    model: ClockModel,
    market: MarketParams,
    contract: VanillaContract,
    *,
    domain: Optional[Sequence[float]] = None,
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
    seed: int = 0,
) -> PriceRecord:
    """Call price with the inputs and slice that produced it."""
    quad = quad or default_quadrature()
    _, sigma = model_theta_sigma(model)
    mu = normalized_mu(model)
    x = float(adjusted_log_moneyness(model, market, contract.K, contract.T))
    T = contract.T
    if domain is not None:
        s = build_slice(x, mu, domain, policy, quad)
    else:
        base = _quantile_pair(model, sigma, T, T, seed)
        if not base[1] - base[0] > 1e-9 * base[1]:
            base = _widen(*base)
        scoring = scoring_set(model, sigma, [T], quad, policy, seed=seed)
        s, _ = search_slice(x, mu, base, scoring, [float(T)], policy, quad)
        if s is None:
            raise SliceRejectedError(f"no admissible slice for K={contract.K:g}, T={T:g}")
    e = price_expectation(s, model, sigma, T)
    price = float(_prefactor(model, market, T) * e)
    return PriceRecord(price, mu, x, s.domain, s.fit_error, s.degree)


def price_call(model: ClockModel, market: MarketParams, contract: VanillaContract, **kw) -> float:
    """``S0 exp(-(q + omega) T) E[c_BS(sigma^2 Z_T; x, mu)]``."""
    if contract.side != "call":
        raise PricingError("price_call needs a call contract")
    return price_call_record(model, market, contract, **kw).price


def put_from_call(call, market: MarketParams, K, T):
    """Put-call parity: ``P = C + K exp(-rT) - S0 exp(-qT)``."""
    return call + np.asarray(K) * np.exp(-market.r * np.asarray(T)) - market.S0 * np.exp(-market.q * np.asarray(T))


def price_put(model: ClockModel, market: MarketParams, contract: VanillaContract, **kw) -> float:
    if contract.side != "put":
        raise PricingError("price_put needs a put contract")
    call = price_call(model, market, VanillaContract(contract.K, contract.T, "call"), **kw)
    return float(put_from_call(call, market, contract.K, contract.T))


# --------------------------------------------------------------------------- #
# Cache
# --------------------------------------------------------------------------- #

_T_EPS = 1e-12


@dataclass(frozen=True)
class CacheNode:
    """A slice together with the maturities it is valid for."""

    slice: PricedSlice
    t_window: tuple[float, float]
    score: float

    def serves(self, T: float) -> bool:
        return self.t_window[0] - _T_EPS <= T <= self.t_window[1] + _T_EPS


def _node_key(n: CacheNode) -> tuple[float, float]:
    return (n.slice.x, n.t_window[0])


@dataclass(frozen=True)
class PriceCache:
    """Slices on an ``x`` grid; prices come from a cubic spline over ``x``.

    For a maturity ``T`` only nodes whose window contains ``T`` enter the
    spline, since the truncation of the others targets different clocks.
    One ``x`` may carry several nodes with adjacent maturity windows.
    """

    model: ClockModel
    market: MarketParams
    mu: float
    sigma: float
    nodes: tuple[CacheNode, ...]
    quad: QuadratureRule = field(repr=False)
    policy: DegreePolicy = DEFAULT_POLICY
    x_range: tuple[float, float] = (0.0, 0.0)
    model_fingerprint: str = ""
    market_fingerprint: str = ""

    def __post_init__(self):
        keys = [_node_key(n) for n in self.nodes]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise CacheError("cache nodes must be sorted by x and maturity window")
        for a, b in zip(self.nodes, self.nodes[1:]):
            if a.slice.x == b.slice.x and a.t_window[1] > b.t_window[0] + _T_EPS:
                raise CacheError(f"overlapping maturity windows at x={a.slice.x:.6g}")
        if len({k[0] for k in keys}) < 4:
            raise CacheError(f"only {len(set(k[0] for k in keys))} slices survived; need at least 4")

    @property
    def x_grid(self) -> np.ndarray:
        return np.unique([n.slice.x for n in self.nodes])

    @property
    def slices(self) -> tuple[PricedSlice, ...]:
        return tuple(n.slice for n in self.nodes)

    def active(self, T: float) -> list[CacheNode]:
        """Nodes serving ``T``, one per ``x`` (the earlier window wins at a boundary)."""
        return _active_nodes(self.nodes, T)

    def angles(self) -> tuple[float, ...]:
        return tuple(sorted({phi for n in self.nodes for phi in n.slice.angles}))

    def n_powers(self) -> int:
        return max([8] + [n.slice.correction_coefficients.size for n in self.nodes])

    @cached_property
    def _stacked(self) -> "_StackedKernels":
        return _stack_kernels(self.nodes, self.angles(), self.n_powers())

    @cached_property
    def _windows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo = np.array([n.t_window[0] for n in self.nodes]) - _T_EPS
        hi = np.array([n.t_window[1] for n in self.nodes]) + _T_EPS
        xs = np.array([n.slice.x for n in self.nodes])
        return lo, hi, xs

    def _active_index(self, T: float) -> np.ndarray:
        """Indices of :meth:`active` nodes."""
        lo, hi, xs = self._windows
        idx = np.nonzero((lo <= T) & (T <= hi))[0]
        if idx.size:
            keep = np.concatenate(([True], xs[idx[1:]] != xs[idx[:-1]]))
            idx = idx[keep]
        return idx

    @cached_property
    def _levy_logs(self) -> Optional[tuple[np.ndarray, dict, np.ndarray]]:
        # Levy clocks: log E[exp(-u Z_T)] = T log E[exp(-u Z_1)]
        if isinstance(self.model, Heston):
            return None
        st = self._stacked
        s2 = self.sigma**2
        u = s2 * self.quad.abscissas
        nodes = np.real(log_laplace_transform(self.model, u, 1.0))
        rays = {phi: log_laplace_transform(self.model, u * np.exp(1j * phi), 1.0) for phi in st.rays}
        powers = np.real(log_laplace_transform(self.model, s2 * np.arange(st.powers.shape[1], dtype=float), 1.0))
        return nodes, rays, powers

    def transform_vectors(self, T: float) -> TransformVectors:
        logs = self._levy_logs
        st = self._stacked
        if logs is None:
            return transform_vectors(self.model, self.sigma, T, self.quad, tuple(st.rays), st.powers.shape[1])
        nodes, rays, powers = logs
        return TransformVectors(
            np.exp(T * nodes), {phi: np.exp(T * r) for phi, r in rays.items()}, np.exp(T * powers)
        )


@dataclass(frozen=True)
class _StackedKernels:
    """Kernel weights of all nodes as matrices, one row per node."""

    constants: np.ndarray
    nodes: np.ndarray
    rays: dict
    powers: np.ndarray

    def expectations(self, idx: np.ndarray, vec: TransformVectors) -> np.ndarray:
        total = self.constants + self.nodes @ vec.nodes
        for phi, W in self.rays.items():
            total += (W @ vec.rays[phi]).real
        total += self.powers @ vec.powers[: self.powers.shape[1]]
        return total[idx]


def _stack_kernels(nodes: Sequence[CacheNode], angles: Sequence[float], n_powers: int) -> _StackedKernels:
    n = len(nodes)
    width = nodes[0].slice.kernel_weights.size
    const = np.array([nd.slice.constant for nd in nodes], dtype=float)
    W = np.zeros((n, width))
    R = {float(phi): np.zeros((n, width), dtype=complex) for phi in angles}
    C = np.zeros((n, n_powers))
    for i, nd in enumerate(nodes):
        s = nd.slice
        W[i] = s.kernel_weights
        for phi, K in s.rotated:
            R[float(phi)][i] += K
        c = s.correction_coefficients
        C[i, : c.size] = c
    return _StackedKernels(const, W, R, C)


def _window(x: float, lo_k: float, hi_k: float, drift: float, T_min: float, T_max: float, pad: float):
    # maturities T with log(S0/K_max) + drift T - pad <= x <= log(S0/K_min) + drift T + pad
    if abs(drift) < 1e-14:
        return (T_min, T_max) if lo_k - pad <= x <= hi_k + pad else None
    t1, t2 = (x - hi_k - pad) / drift, (x - lo_k + pad) / drift
    lo, hi = max(min(t1, t2), T_min), min(max(t1, t2), T_max)
    return (lo, hi) if lo <= hi else None


def _thin(mats: Sequence[float], cap: int = 6) -> list[float]:
    if len(mats) <= cap:
        return list(mats)
    idx = np.unique(np.round(np.linspace(0, len(mats) - 1, cap)).astype(int))
    return [mats[i] for i in idx]


def _active_nodes(nodes: Sequence[CacheNode], T: float) -> list[CacheNode]:
    out: list[CacheNode] = []
    for n in nodes:
        if n.serves(T) and not (out and out[-1].slice.x == n.slice.x):
            out.append(n)
    return out


def build_cache(
    model: ClockModel,
    market: MarketParams,
    contracts: Sequence[VanillaContract],
    *,
    n_slices: int = 30,
    policy: DegreePolicy = DEFAULT_POLICY,
    quad: Optional[QuadratureRule] = None,
    seed: int = 0,
    refine_tol: float = 1e-7,
    max_slices: int = 90,
    n_points: int = 4000,
) -> PriceCache:
    """Fit slices on an ``x`` grid spanning the contracts' ``x_TC`` range.

    Starts from ``n_slices`` equally spaced nodes.  Each node serves the
    maturities whose strike range reaches it and searches the ten truncation
    candidates built from the clock quantiles over those maturities.  When no
    candidate is admissible the maturity window is halved and each half is
    fitted separately; ``x`` values that fail outright are dropped.  Where a
    maturity's strike range is left uncovered, replacement nodes are tried
    just outside the surviving ones.  Finally, intervals where a
    leave-one-out spline misses a node by more than ``refine_tol`` are
    bisected, up to ``max_slices`` nodes.
    """
    from .storage import fingerprint

    if not contracts:
        raise CacheError("need at least one contract")
    quad = quad or default_quadrature()
    _, sigma = model_theta_sigma(model)
    mu = normalized_mu(model)
    Ks = np.array([c.K for c in contracts], dtype=float)
    Ts = np.array([c.T for c in contracts], dtype=float)
    T_min, T_max = float(Ts.min()), float(Ts.max())
    drift = market.r - market.q - omega(model)
    lo_k, hi_k = math.log(market.S0 / Ks.max()), math.log(market.S0 / Ks.min())
    corners = [lo_k + drift * T_min, lo_k + drift * T_max, hi_k + drift * T_min, hi_k + drift * T_max]
    x_lo, x_hi = min(corners), max(corners)
    if x_hi - x_lo < 1e-6:
        x_lo, x_hi = x_lo - 0.02, x_hi + 0.02
        lo_k, hi_k = lo_k - 0.02, hi_k + 0.02
    grid = np.linspace(x_lo, x_hi, n_slices)
    pad = 2.0 * (grid[1] - grid[0])

    all_mats = np.unique(Ts)
    if all_mats.size > 12:
        all_mats = np.unique(np.quantile(all_mats, np.linspace(0, 1, 12), method="nearest"))
    all_mats = [float(t) for t in all_mats]
    scoring = scoring_set(model, sigma, all_mats, quad, policy, seed=seed, n_points=n_points)

    def attempt(x: float, win: tuple[float, float], mats: list[float]) -> Optional[CacheNode]:
        sel = _thin(mats)
        a = float(np.quantile(scoring.values[sel[0]], 0.001))
        b = float(np.quantile(scoring.values[sel[-1]], 0.999))
        if not b - a > 1e-9 * b:
            a, b = _widen(a, b)
        s, sc = search_slice(x, mu, (a, b), scoring, sel, policy, quad)
        return None if s is None else CacheNode(s, (float(win[0]), float(win[1])), sc)

    def split(x: float, win: tuple[float, float], mats: list[float]) -> list[CacheNode]:
        node = attempt(x, win, mats)
        if node is not None:
            return [node]
        if len(mats) == 1:
            return []
        k = len(mats) // 2
        cut = 0.5 * (mats[k - 1] + mats[k])
        return split(x, (win[0], cut), mats[:k]) + split(x, (cut, win[1]), mats[k:])

    def make_nodes(x: float) -> list[CacheNode]:
        win = _window(x, lo_k, hi_k, drift, T_min, T_max, pad)
        if win is None:
            return []
        mats = [t for t in all_mats if win[0] - _T_EPS <= t <= win[1] + _T_EPS]
        if not mats:
            mid = 0.5 * (win[0] + win[1])
            mats = [min(all_mats, key=lambda t: abs(t - mid))]
        return split(x, win, mats)

    nodes: list[CacheNode] = []
    for x in grid:
        nodes.extend(make_nodes(float(x)))
    nodes.sort(key=_node_key)

    # dropped nodes near a maturity's strike range leave it uncovered; try
    # replacements stepping outward from the last node that does serve it
    step = 0.25 * (grid[1] - grid[0])
    for t in all_mats:
        need = (lo_k + drift * t, hi_k + drift * t)
        for side in (0, 1):
            act = [n.slice.x for n in _active_nodes(nodes, t)]
            if act and (min(act) <= need[0] + 1e-12 if side == 0 else max(act) >= need[1] - 1e-12):
                continue
            edge = (min(act) if side == 0 else max(act)) if act else need[side]
            sign = -1.0 if side == 0 else 1.0
            for k in range(1, 13):
                xk = float(edge + sign * k * step)
                if any(abs(n.slice.x - xk) < 1e-12 for n in nodes):
                    continue
                new = make_nodes(xk)
                nodes = sorted(nodes + new, key=_node_key)
                if any(n.serves(t) for n in new) and ((xk <= need[0]) if side == 0 else (xk >= need[1])):
                    break
    if len({n.slice.x for n in nodes}) < 4:
        raise CacheError(f"only {len({n.slice.x for n in nodes})} slices survived; need at least 4")

    # bisect where a leave-one-out spline misses a node
    vec_cache: dict[float, TransformVectors] = {}

    def vectors(t: float) -> TransformVectors:
        if t not in vec_cache:
            vec_cache[t] = transform_vectors(model, sigma, t, quad, policy.ray_angles, policy.correction_degree + 1)
        return vec_cache[t]

    value_cache: dict[tuple[float, float, float], float] = {}

    def value(n: CacheNode, t: float) -> float:
        key = (*_node_key(n), t)
        if key not in value_cache:
            value_cache[key] = _expectation(n.slice, vectors(t))
        return value_cache[key]

    tried: set[float] = set()
    while len({n.slice.x for n in nodes}) < max_slices:
        worst, worst_x = refine_tol, None
        for t in all_mats:
            act = _active_nodes(nodes, t)
            if len(act) < 5:
                continue
            ax = np.array([n.slice.x for n in act])
            vals = np.array([value(n, t) for n in act])
            for j in range(1, len(act) - 1):
                keep = np.ones(len(act), dtype=bool)
                keep[j] = False
                err = abs(float(CubicSpline(ax[keep], vals[keep])(ax[j])) - vals[j])
                if err <= worst:
                    continue
                # bisect the wider neighbouring gap
                left = ax[j] - ax[j - 1] >= ax[j + 1] - ax[j]
                xm = float(0.5 * (ax[j - 1] + ax[j]) if left else 0.5 * (ax[j] + ax[j + 1]))
                if xm not in tried and not any(abs(n.slice.x - xm) < 1e-12 for n in nodes):
                    worst, worst_x = err, xm
        if worst_x is None:
            break
        tried.add(worst_x)
        nodes = sorted(nodes + make_nodes(worst_x), key=_node_key)

    return PriceCache(
        model,
        market,
        mu,
        sigma,
        tuple(nodes),
        quad,
        policy,
        (float(x_lo), float(x_hi)),
        fingerprint(model),
        fingerprint(market),
    )


def cache_expectations(cache: PriceCache, T: float, x) -> np.ndarray:
    """Spline-interpolated ``E[c_BS]`` at maturity ``T`` for query points ``x``."""
    idx = cache._active_index(T)
    if idx.size < 4:
        raise CacheError(f"fewer than four cache slices serve maturity {T:g}")
    ax = cache._windows[2][idx]
    x = np.asarray(x, dtype=float)
    tol = 1e-9
    if np.any(x < ax[0] - tol) or np.any(x > ax[-1] + tol):
        raise CacheError("query outside the cache's x range")
    vals = cache._stacked.expectations(idx, cache.transform_vectors(T))
    return CubicSpline(ax, vals)(np.clip(x, ax[0], ax[-1]))


def price_with_cache(cache: PriceCache, contract: VanillaContract) -> float:
    """Price one contract by interpolation over the cached slices."""
    x = adjusted_log_moneyness(cache.model, cache.market, contract.K, contract.T)
    e = float(cache_expectations(cache, contract.T, x))
    call = float(_prefactor(cache.model, cache.market, contract.T) * e)
    if contract.side == "put":
        return float(put_from_call(call, cache.market, contract.K, contract.T))
    return call


def price_grid_with_cache(cache: PriceCache, strikes: Sequence[float], maturities: Sequence[float]) -> np.ndarray:
    """Call prices, shape ``(len(strikes), len(maturities))``; one transform per maturity."""
    strikes = np.asarray(strikes, dtype=float)
    out = np.empty((strikes.size, len(maturities)))
    for j, T in enumerate(maturities):
        x = adjusted_log_moneyness(cache.model, cache.market, strikes, T)
        out[:, j] = _prefactor(cache.model, cache.market, T) * cache_expectations(cache, float(T), x)
    return out


# --------------------------------------------------------------------------- #
# Error accounting
# --------------------------------------------------------------------------- #

def vg_variance_density(model: VarianceGamma, T: float) -> Callable[[np.ndarray], np.ndarray]:
    """Density of ``sigma^2 Z_T`` for the gamma clock."""
    from scipy import stats

    law = stats.gamma(T / model.nu, scale=model.nu * model.sigma**2)
    return law.pdf


def error_report(
    slice_: PricedSlice,
    model: ClockModel,
    sigma: float,
    T: float,
    density_or_samples: Union[Callable, np.ndarray],
) -> tuple[float, float, float]:
    """Absolute region errors ``(eps_[0,a], eps_[a,b], eps_[b,inf))``.

    Each is ``int (c_BS - approximation) f`` over its region, where the
    approximation is the quadrature form.  A callable is treated as the
    density of ``sigma^2 Z_T``; an array as samples of it.
    """
    a, b = slice_.domain

    def err(v):
        return c_bs(v, slice_.x, slice_.mu) - slice_.approximate(v)

    if callable(density_or_samples):
        dens = density_or_samples

        def integrand(v):
            return float(err(np.array([v]))[0] * dens(v))

        out = []
        for lo, hi in ((0.0, a), (a, b), (b, np.inf)):
            val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-10)
            out.append(abs(val))
        return tuple(out)  # type: ignore[return-value]

    v = np.asarray(density_or_samples, dtype=float)
    if v.size == 0:
        raise PricingError("need a nonempty sample")
    e = np.concatenate([err(chunk) for chunk in np.array_split(v, max(1, v.size // 2000))])
    lo, hi = v < a, v > b
    mid = ~(lo | hi)
    n = v.size
    return abs(e[lo].sum()) / n, abs(e[mid].sum()) / n, abs(e[hi].sum()) / n
