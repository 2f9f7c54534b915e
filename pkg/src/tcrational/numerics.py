"""Numerical kernels: Chebyshev and rational Chebyshev approximation,
partial fractions, Gauss-Legendre quadrature and a few special functions.

All objects here are immutable value types; functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P
from scipy import special

RealFunction = Callable[[np.ndarray], np.ndarray]

_DOMAIN_TOL = 1e-12


class NumericsError(ValueError):
    """Base class for numerical failures in this module."""


class SingularSystemError(NumericsError):
    """Linear system for the rational fit is numerically rank deficient."""


class RepeatedRootError(NumericsError):
    """Denominator has (numerically) repeated roots."""


# --------------------------------------------------------------------------- #
# Special functions
# --------------------------------------------------------------------------- #

def std_normal_cdf(z):
    """Standard normal distribution function, accurate to full double precision."""
    return special.ndtr(z)


def regularized_lower_incomplete_gamma(a: float, b):
    """``Gamma(a)^-1 * int_0^b t^(a-1) e^-t dt``.

    This is the function the gamma-clock CDF is written in terms of.
    """
    if not a > 0:
        raise NumericsError(f"shape parameter must be positive, got {a}")
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise NumericsError("upper limit must be nonnegative")
    out = special.gammainc(a, b)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- #
# Chebyshev series
# --------------------------------------------------------------------------- #

def _to_unit(x, a: float, b: float):
    return (2.0 * np.asarray(x) - (b + a)) / (b - a)


def _from_unit(y, a: float, b: float):
    return 0.5 * (b - a) * np.asarray(y) + 0.5 * (b + a)


def _clenshaw(coef: np.ndarray, y):
    """Evaluate sum_j coef[j] T_j(y) by backward recurrence (complex-safe)."""
    y = np.asarray(y)
    b1 = np.zeros_like(y, dtype=np.result_type(y, coef, float))
    b2 = np.zeros_like(b1)
    for c in coef[:0:-1]:
        b1, b2 = 2.0 * y * b1 - b2 + c, b1
    return y * b1 - b2 + coef[0]


@dataclass(frozen=True)
class ChebyshevSeries:
    """Truncated series ``c0/2 + sum_{j>=1} c_j T_j(y)`` on ``[a, b]``.

    Note the halved constant term: ``coefficients[0]`` is twice the mean value.
    """

    coefficients: np.ndarray
    domain: tuple[float, float]

    def __post_init__(self):
        a, b = self.domain
        if not a < b:
            raise NumericsError(f"invalid domain {self.domain}")
        coef = np.array(self.coefficients, dtype=float)
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "domain", (float(a), float(b)))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, x):
        return chebyshev_eval(self, x)

    def standard_coefficients(self) -> np.ndarray:
        """Coefficients in the ordinary ``sum c_j T_j`` convention."""
        c = self.coefficients.copy()
        c[0] *= 0.5
        return c

    def monomial_coefficients(self) -> np.ndarray:
        """Power-series coefficients in the *unmapped* variable ``x``."""
        a, b = self.domain
        series = C.Chebyshev(self.standard_coefficients(), domain=[a, b])
        return series.convert(kind=P.Polynomial).coef


def chebyshev_nodes(n: int) -> np.ndarray:
    """Zeros of T_n, ``cos(pi (k - 0.5) / n)`` for k = 1..n."""
    k = np.arange(1, n + 1)
    return np.cos(np.pi * (k - 0.5) / n)


def chebyshev_coefficients(f: RealFunction, domain: Sequence[float], n: int) -> np.ndarray:
    """Discrete Chebyshev coefficients ``c_0..c_{n-1}`` of f from n samples."""
    if n < 2:
        raise NumericsError("need at least two samples")
    a, b = float(domain[0]), float(domain[1])
    k = np.arange(1, n + 1)
    theta = np.pi * (k - 0.5) / n
    fx = np.asarray(f(_from_unit(np.cos(theta), a, b)), dtype=float)
    if fx.shape != (n,):
        fx = np.broadcast_to(fx, (n,))
    if not np.all(np.isfinite(fx)):
        raise NumericsError("function is not finite at the Chebyshev nodes")
    j = np.arange(n)
    return (2.0 / n) * (np.cos(np.outer(j, theta)) @ fx)


def chebyshev_fit(f: RealFunction, domain: Sequence[float], n: int) -> ChebyshevSeries:
    """Degree ``n-1`` Chebyshev interpolant of f on ``domain`` from n nodes."""
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise NumericsError(f"invalid domain {domain}")
    return ChebyshevSeries(chebyshev_coefficients(f, (a, b), n), (a, b))


def chebyshev_eval(series: ChebyshevSeries, x):
    """Evaluate a ChebyshevSeries at points inside (or 1e-12 beyond) its domain."""
    a, b = series.domain
    x = np.asarray(x, dtype=float)
    tol = _DOMAIN_TOL * max(1.0, abs(a), abs(b))
    if np.any(x < a - tol) or np.any(x > b + tol):
        raise NumericsError(f"point outside Chebyshev domain [{a}, {b}]")
    y = np.clip(_to_unit(x, a, b), -1.0, 1.0)
    out = _clenshaw(series.standard_coefficients(), y)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- #
# Rational Chebyshev approximation
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class RationalApproximant:
    """``sum a_j T_j(y) / sum b_j T_j(y)`` on ``[a, b]`` with ``b_0 = 1``.

    ``y`` is the affine image of the argument in ``[-1, 1]``.  Both the
    Chebyshev coefficients and the equivalent power-series coefficients in the
    unmapped variable are kept.
    """

    numerator_cheb: np.ndarray
    denominator_cheb: np.ndarray
    domain: tuple[float, float]

    def __post_init__(self):
        a, b = self.domain
        if not a < b:
            raise NumericsError(f"invalid domain {self.domain}")
        num = np.array(self.numerator_cheb, dtype=float)
        den = np.array(self.denominator_cheb, dtype=float)
        if len(num) != len(den):
            raise NumericsError("numerator and denominator degrees differ")
        if den[0] == 0.0:
            raise NumericsError("denominator constant term vanishes")
        num, den = num / den[0], den / den[0]
        for arr in (num, den):
            arr.setflags(write=False)
        object.__setattr__(self, "numerator_cheb", num)
        object.__setattr__(self, "denominator_cheb", den)
        object.__setattr__(self, "domain", (float(a), float(b)))

    @cached_property
    def numerator_mono(self) -> np.ndarray:
        mono = C.Chebyshev(self.numerator_cheb, domain=list(self.domain)).convert(kind=P.Polynomial).coef
        return _pad(mono, len(self.numerator_cheb))

    @cached_property
    def denominator_mono(self) -> np.ndarray:
        mono = C.Chebyshev(self.denominator_cheb, domain=list(self.domain)).convert(kind=P.Polynomial).coef
        return _pad(mono, len(self.denominator_cheb))

    @property
    def degree(self) -> int:
        return len(self.numerator_cheb) - 1

    def __call__(self, x):
        y = _to_unit(x, *self.domain)
        out = _clenshaw(self.numerator_cheb, y) / _clenshaw(self.denominator_cheb, y)
        return out if np.ndim(out) else out[()]

    def eval_monomial(self, x):
        """Evaluate through the power-series form (for consistency checks)."""
        x = np.asarray(x)
        return P.polyval(x, self.numerator_mono) / P.polyval(x, self.denominator_mono)

    def max_error(self, f: RealFunction, n: int = 512) -> float:
        """Max |f - R| on ``n`` Chebyshev extreme points of the domain."""
        x = extreme_grid(self.domain, n)
        return float(np.max(np.abs(np.asarray(f(x)) - self(x))))

    def poles(self) -> np.ndarray:
        """Roots of the denominator in the unmapped variable."""
        a, b = self.domain
        return _from_unit(poly_roots(C.cheb2poly(self.denominator_cheb)), a, b)

    def denominator_sign_change(self, n: int = 2048) -> bool:
        """True if the denominator vanishes inside the domain (fine-grid check)."""
        q = _clenshaw(self.denominator_cheb, np.linspace(-1.0, 1.0, n))
        return bool(np.any(q == 0.0) or np.any(np.sign(q[1:]) != np.sign(q[:-1])))


def _pad(coef: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[: min(n, len(coef))] = coef[:n]
    return out


def extreme_grid(domain: Sequence[float], n: int) -> np.ndarray:
    """``n`` Chebyshev extreme points mapped to ``domain`` (endpoints included)."""
    y = np.cos(np.pi * np.arange(n) / (n - 1))[::-1]
    return _from_unit(y, float(domain[0]), float(domain[1]))


def rational_chebyshev_fit(
    f: RealFunction,
    domain: Sequence[float],
    m: int,
    n_samples: Optional[int] = None,
    max_condition: float = 1e12,
) -> RationalApproximant:
    """Degree (m, m) rational Chebyshev approximation of f on ``domain``.

    The Chebyshev coefficients of f are matched term by term: with b_0 = 1,
    ``2 a_r = sum_i b_i (c_{i+r} + c_{|i-r|})`` for r = 0..2m (a_r = 0 for
    r > m), using the c_0/2 convention.  That gives 2m+1 linear equations for
    a_0..a_m, b_1..b_m.
    """
    if m < 1:
        raise NumericsError("degree must be at least 1")
    a, b = float(domain[0]), float(domain[1])
    n = n_samples or max(64, 4 * m + 4)
    if n < 3 * m + 1:
        raise NumericsError("too few samples for the requested degree")
    c = chebyshev_coefficients(f, (a, b), n)

    size = 2 * m + 1
    A = np.zeros((size, size))
    rhs = np.empty(size)
    for r in range(size):
        if r <= m:
            A[r, r] = 2.0
        for i in range(1, m + 1):
            A[r, m + i] = -(c[i + r] + c[abs(i - r)]) if r else -c[i]
        rhs[r] = 2.0 * c[r] if r else c[0]

    # Equilibrate columns so the condition estimate ignores plain scaling.
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0.0] = 1.0
    As = A / scale
    cond = np.linalg.cond(As)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularSystemError(
            f"rational fit system is ill-conditioned (cond={cond:.3g}) for m={m}"
        )
    sol = np.linalg.solve(As, rhs) / scale
    return RationalApproximant(sol[: m + 1], np.concatenate(([1.0], sol[m + 1:])), (a, b))


def minimax_refine(
    approx: RationalApproximant,
    f: RealFunction,
    max_iters: int = 6,
    n_grid: int = 512,
    plain_passes: int = 2,
) -> RationalApproximant:
    """Push a rational approximant toward the equal-ripple (minimax) solution.

    Each pass solves the linearised weighted least-squares problem
    ``min sum w_i ((p_i - f_i q_i) / q_prev_i)^2`` in the Chebyshev basis.
    The first ``plain_passes`` use uniform weights (Loeb iteration towards the
    rational least-squares fit); after that the weights are multiplied by the
    current absolute error (Lawson), so points where the error peaks gain
    influence.  Iterates whose denominator changes sign on the grid are never
    returned.  The best iterate by maximum error on the grid is returned; if
    none beats the input, the input is.
    """
    a, b = approx.domain
    m = approx.degree
    x = extreme_grid((a, b), n_grid)
    y = _to_unit(x, a, b)
    fx = np.asarray(f(x), dtype=float)

    best_err = float(np.max(np.abs(fx - approx(x))))
    best = approx
    if best_err == 0.0:
        return approx

    V = C.chebvander(y, m)
    q_prev = _clenshaw(approx.denominator_cheb, y)
    w = np.full(x.shape, 1.0 / x.size)
    for it in range(max_iters):
        s = np.sqrt(w) / np.abs(q_prev)
        M = np.hstack([V, -fx[:, None] * V[:, 1:]]) * s[:, None]
        colnorm = np.linalg.norm(M, axis=0)
        colnorm[colnorm == 0.0] = 1.0
        sol, *_ = np.linalg.lstsq(M / colnorm, fx * s, rcond=None)
        sol = sol / colnorm
        num, den = sol[: m + 1], np.concatenate(([1.0], sol[m + 1:]))
        q = _clenshaw(den, y)
        err = fx - _clenshaw(num, y) / q
        e = float(np.max(np.abs(err)))
        if e < best_err and np.all(np.sign(q) == np.sign(q[0])):
            best_err, best = e, RationalApproximant(num, den, (a, b))
        q_prev = q
        if it + 1 >= plain_passes:
            w = _lawson_weights(w, err)
    return best


def _lawson_weights(w: np.ndarray, err: np.ndarray) -> np.ndarray:
    w = w * np.abs(err)
    med = np.median(w[w > 0]) if np.any(w > 0) else 1.0
    w = np.clip(w, 1e-3 * med, 1e3 * med)
    return w / w.sum()


# --------------------------------------------------------------------------- #
# Roots and partial fractions
# --------------------------------------------------------------------------- #

def poly_roots(coefficients: Sequence[float]) -> np.ndarray:
    """Roots of ``sum coefficients[k] x^k`` from companion-matrix eigenvalues.

    Trailing (leading-order) zeros are stripped; LAPACK balances the
    companion matrix before the QR iteration.
    """
    c = np.trim_zeros(np.asarray(coefficients, dtype=complex), "b")
    if c.size == 0:
        raise NumericsError("zero polynomial has no well-defined roots")
    n = c.size - 1
    if n < 1:
        raise NumericsError("constant polynomial has no roots")
    comp = np.zeros((n, n), dtype=complex)
    comp[1:, :-1] = np.eye(n - 1)
    comp[:, -1] = -c[:-1] / c[-1]
    roots = np.linalg.eigvals(comp)
    if np.all(np.isreal(c)):
        roots = _symmetrize_conjugates(roots)
    return roots


def _symmetrize_conjugates(roots: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Snap near-real roots to the axis and make complex pairs exact conjugates."""
    scale = max(1.0, float(np.max(np.abs(roots)))) if roots.size else 1.0
    out = roots.astype(complex).copy()
    used = np.zeros(out.size, dtype=bool)
    for i, r in enumerate(out):
        if used[i]:
            continue
        if abs(r.imag) <= tol * scale:
            out[i] = r.real
            used[i] = True
            continue
        cand = [j for j in range(out.size) if not used[j] and j != i]
        if not cand:
            continue
        j = min(cand, key=lambda k: abs(out[k] - np.conj(r)))
        if abs(out[j] - np.conj(r)) <= tol * scale:
            mid = 0.5 * (r + np.conj(out[j]))
            out[i], out[j] = mid, np.conj(mid)
            used[i] = used[j] = True
    return out


@dataclass(frozen=True)
class PartialFractionForm:
    """``A0 + sum_j A_j / (v - B_j) + correction(exp(-v))``.

    Each explicit pole carries the angle ``phi_j`` of the ray along which its
    Laplace integral ``1/(v - B) = e^{i phi} int_0^inf exp(-(v - B) t e^{i phi}) dt``
    is taken.  ``phi = 0`` is the ordinary real-axis integral and requires
    ``Re(B) < 0``; a rotated ray requires ``Re(-B e^{i phi}) > 0`` so the
    integral converges for every ``v >= 0``.  Poles that fit neither are
    folded into a Chebyshev series in ``exp(-v)`` (``correction``).
    """

    constant: float
    residues: np.ndarray
    poles: np.ndarray
    correction: Optional[ChebyshevSeries] = None
    angles: Optional[np.ndarray] = None

    def __post_init__(self):
        res = np.array(self.residues, dtype=complex)
        pol = np.array(self.poles, dtype=complex)
        ang = np.zeros(pol.shape) if self.angles is None else np.array(self.angles, dtype=float)
        if res.shape != pol.shape or ang.shape != pol.shape:
            raise NumericsError("residues, poles and angles must pair up")
        decay = (-pol * np.exp(1j * ang)).real
        if pol.size and np.any(decay <= 0):
            raise NumericsError("every explicit pole needs a convergent Laplace ray")
        for arr in (res, pol, ang):
            arr.setflags(write=False)
        object.__setattr__(self, "residues", res)
        object.__setattr__(self, "poles", pol)
        object.__setattr__(self, "angles", ang)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def rotated(self) -> bool:
        return bool(np.any(self.angles != 0))

    @cached_property
    def _monomials(self) -> np.ndarray:
        if self.correction is None:
            return np.zeros(0)
        c = self.correction.monomial_coefficients()
        c.setflags(write=False)
        return c

    def correction_monomials(self) -> np.ndarray:
        """Power-series coefficients c_i of the correction in ``exp(-v)``."""
        return self._monomials

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        out = np.full(v.shape, self.constant, dtype=complex)
        for A, B in zip(self.residues, self.poles):
            out = out + A / (v - B)
        out = out.real
        if self.correction is not None:
            lo, hi = self.correction.domain
            out = out + _clenshaw(
                self.correction.standard_coefficients(), _to_unit(np.exp(-v), lo, hi)
            )
        return out if out.ndim else out[()]


def _ray_angle(
    pole: complex, candidates: Sequence[float], min_decay: float, fallback_decay: Optional[float] = None
) -> Optional[float]:
    """Smallest candidate angle (signed like Im B) whose ray decays fast enough.

    If none reaches ``min_decay``, the fastest-decaying ray is used provided
    its decay is at least ``fallback_decay``.
    """
    sign = 1.0 if pole.imag >= 0 else -1.0
    best, best_decay = None, -np.inf
    for phi in sorted(abs(c) for c in candidates):
        if phi == 0.0:
            continue
        decay = (-pole * np.exp(1j * sign * phi)).real
        if decay >= min_decay:
            return sign * phi
        if decay > best_decay:
            best, best_decay = sign * phi, decay
    if fallback_decay is not None and best is not None and best_decay >= max(fallback_decay, 0.0) and best_decay > 0:
        return best
    return None


def partial_fractions(
    approx: RationalApproximant,
    correction_degree: int = 7,
    ray_angles: Sequence[float] = (),
    min_decay: float = 0.0,
    fallback_decay: Optional[float] = None,
) -> PartialFractionForm:
    """Split a degree-(m, m) rational into constant plus simple poles.

    Residues are ``num(B_j) / den'(B_j)``.  Poles with negative real part
    keep the real-axis ray.  A pole with nonnegative real part is given the
    smallest angle from ``ray_angles`` whose decay rate at ``v = 0`` is at
    least ``min_decay`` (or, failing that, the fastest ray if it reaches
    ``fallback_decay``); the remaining ones are summed and refit as a
    degree-``correction_degree`` Chebyshev series in ``v* = exp(-v)`` over
    ``[exp(-b), exp(-a)]``.
    """
    a, b = approx.domain
    num, den = approx.numerator_cheb, approx.denominator_cheb
    if den[-1] == 0.0:
        raise NumericsError("denominator degree collapsed; refit with a lower degree")
    y_roots = poly_roots(C.cheb2poly(den))
    scale = max(float(np.max(np.abs(y_roots))), 1e-300)
    for i in range(len(y_roots)):
        for j in range(i + 1, len(y_roots)):
            # a computed double root splits by about sqrt(eps)
            if abs(y_roots[i] - y_roots[j]) <= 1e-6 * scale:
                raise RepeatedRootError(
                    "repeated denominator root; change the approximation degree"
                )
    dden = C.chebder(den)
    jac = 2.0 / (b - a)
    residues = _clenshaw(num, y_roots.astype(complex)) / (
        _clenshaw(dden, y_roots.astype(complex)) * jac
    )
    poles = _from_unit(y_roots, a, b).astype(complex)
    constant = num[-1] / den[-1]

    angles = np.zeros(poles.size)
    keep = poles.real < 0
    for j in np.flatnonzero(~keep):
        phi = _ray_angle(poles[j], ray_angles, min_decay, fallback_decay)
        if phi is not None:
            angles[j], keep[j] = phi, True
    # conjugate partners must agree, otherwise the sum stops being real
    for j in range(poles.size):
        k = int(np.argmin(np.abs(poles - np.conj(poles[j]))))
        if k != j and keep[j] != keep[k]:
            keep[j] = keep[k] = False

    correction = None
    if not np.all(keep):
        bad_res, bad_pol = residues[~keep], poles[~keep]

        def tail(vstar):
            v = -np.log(vstar)
            tot = np.zeros(np.shape(v), dtype=complex)
            for A, B in zip(bad_res, bad_pol):
                tot = tot + A / (v - B)
            return tot.real

        correction = chebyshev_fit(tail, (np.exp(-b), np.exp(-a)), correction_degree + 1)
    return PartialFractionForm(constant, residues[keep], poles[keep], correction, angles[keep])


# --------------------------------------------------------------------------- #
# Quadrature
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre abscissas and weights on ``[c, d]``."""

    abscissas: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]
    tail_nodes: int = 0

    def __post_init__(self):
        for name in ("abscissas", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return len(self.abscissas)

    def integrate(self, f: RealFunction) -> float:
        return float(np.dot(self.weights, f(self.abscissas)))

    def with_log_tail(self, n: int, span: float) -> "QuadratureRule":
        """Append an ``n``-point rule for ``[d, d e^span]`` in ``y = log(t/d)``.

        Integrands with slow algebraic decay past ``d`` are then captured up
        to ``d e^span``; ``interval`` keeps the finite part.
        """
        if n < 1 or self.tail_nodes:
            raise NumericsError("tail needs n >= 1 and a rule without one")
        d = self.interval[1]
        g = gauss_legendre(n, 0.0, span)
        t = d * np.exp(g.abscissas)
        return QuadratureRule(
            np.concatenate((self.abscissas, t)),
            np.concatenate((self.weights, g.weights * t)),
            self.interval,
            n,
        )


def gauss_legendre(L: int, c: float = -1.0, d: float = 1.0) -> QuadratureRule:
    """L-point Gauss-Legendre rule on ``[c, d]`` by Newton iteration on P_L."""
    if L < 1:
        raise NumericsError("need at least one node")
    if not c < d:
        raise NumericsError("empty interval")
    n = L
    half = (n + 1) // 2
    i = np.arange(1, half + 1)
    z = np.cos(np.pi * (i - 0.25) / (n + 0.5))
    for _ in range(100):
        p1 = np.ones_like(z)
        p2 = np.zeros_like(z)
        for j in range(1, n + 1):
            p1, p2 = ((2 * j - 1) * z * p1 - (j - 1) * p2) / j, p1
        dp = n * (z * p1 - p2) / (z * z - 1.0)
        dz = p1 / dp
        z = z - dz
        if np.max(np.abs(dz)) < 1e-15:
            break
    # one more evaluation for the derivative at the converged nodes
    p1 = np.ones_like(z)
    p2 = np.zeros_like(z)
    for j in range(1, n + 1):
        p1, p2 = ((2 * j - 1) * z * p1 - (j - 1) * p2) / j, p1
    dp = n * (z * p1 - p2) / (z * z - 1.0)
    w = 2.0 / ((1.0 - z * z) * dp * dp)

    nodes = np.concatenate((-z, z[::-1][n % 2:]))
    weights = np.concatenate((w, w[::-1][n % 2:]))
    if n % 2:
        nodes[half - 1] = 0.0
    half_len = 0.5 * (d - c)
    return QuadratureRule(half_len * nodes + 0.5 * (c + d), half_len * weights, (float(c), float(d)))
