"""Stochastic clock models and the quantities the pricer needs from them.

Three clocks are supported:

* ``VarianceGamma``: gamma subordinator with unit mean rate, variance ``nu``.
* ``CGMY``: the subordinator under which ``theta Z + W_Z`` is a CGMY process
  with ``theta = (G - M)/2`` and unit volatility.
* ``Heston``: integrated CIR variance (zero correlation), so that the log
  price is ``-Z/2 + W_Z``.

The log price is ``X_t = theta Z_t + sigma W_{Z_t}`` and
``E[exp(i z X_t)] = L(-(i z theta - z^2 sigma^2 / 2), t)`` where ``L`` is the
Laplace transform of the clock.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import special

from .numerics import regularized_lower_incomplete_gamma


class ModelError(ValueError):
    """Invalid model parameters or evaluation outside a transform's domain."""


class SimulationUnavailableError(ModelError):
    """The model has neither a closed-form CDF nor a simulator."""


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise ModelError(f"{name} must be positive and finite, got {value}")
    return value


@dataclass(frozen=True)
class VarianceGamma:
    sigma: float
    nu: float
    theta: float

    def __post_init__(self):
        _positive("sigma", self.sigma)
        _positive("nu", self.nu)
        if not math.isfinite(self.theta):
            raise ModelError("theta must be finite")
        if 1.0 - self.nu * (self.theta + 0.5 * self.sigma**2) <= 0.0:
            raise ModelError("VG compensator undefined: 1 - nu(theta + sigma^2/2) <= 0")


@dataclass(frozen=True)
class CGMY:
    C: float
    G: float
    M: float
    Y: float

    def __post_init__(self):
        for name in ("C", "G", "M"):
            _positive(name, getattr(self, name))
        if not 0.0 < self.Y < 2.0:
            raise ModelError(f"Y must lie in (0, 2), got {self.Y}")
        if self.Y == 1.0:
            raise ModelError("Y = 1 is a removable singularity of Gamma(-Y); not supported")
        if self.M <= 1.0:
            raise ModelError("M must exceed 1 for the asset to have a finite mean")

    @property
    def theta(self) -> float:
        return 0.5 * (self.G - self.M)

    @property
    def sigma(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Heston:
    kappa: float
    delta: float
    xi: float
    V0: float

    def __post_init__(self):
        for name in ("kappa", "delta", "xi", "V0"):
            _positive(name, getattr(self, name))

    @property
    def theta(self) -> float:
        return -0.5

    @property
    def sigma(self) -> float:
        return 1.0

    @property
    def feller(self) -> bool:
        return 2.0 * self.kappa * self.delta >= self.xi**2


@dataclass(frozen=True)
class DeterministicClock:
    """``Z_t = rate * t``: Black-Scholes with volatility ``sigma * sqrt(rate)``.

    Not one of the preset models; used for sanity checks.
    """

    sigma: float
    theta: float = 0.0
    rate: float = 1.0

    def __post_init__(self):
        _positive("sigma", self.sigma)
        _positive("rate", self.rate)
        if not math.isfinite(self.theta):
            raise ModelError("theta must be finite")


ClockModel = Union[VarianceGamma, CGMY, Heston, DeterministicClock]


def model_theta_sigma(model: ClockModel) -> tuple[float, float]:
    """Drift and volatility of the Brownian motion run on the clock."""
    return float(model.theta), float(model.sigma)


@dataclass(frozen=True)
class MarketParams:
    S0: float
    r: float
    q: float

    def __post_init__(self):
        _positive("S0", self.S0)
        for name in ("r", "q"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ModelError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class VanillaContract:
    K: float
    T: float
    side: str = "call"

    def __post_init__(self):
        _positive("strike", self.K)
        _positive("maturity", self.T)
        if self.side not in ("call", "put"):
            raise ModelError(f"side must be 'call' or 'put', got {self.side!r}")


# --------------------------------------------------------------------------- #
# Laplace transforms
# --------------------------------------------------------------------------- #

def _on_cut(s: np.ndarray) -> np.ndarray:
    return (s.real <= 0) & (np.abs(s.imag) <= 1e-14 * (1.0 + np.abs(s.real)))


def log_laplace_transform(model: ClockModel, u, t: float, *, continuation: bool = False):
    """``log E[exp(-u Z_t)]`` on the principal branch, vectorised over ``u``.

    By default ``u`` must lie where the expectation converges.  With
    ``continuation=True`` the analytic continuation is returned everywhere
    off the branch cut on the negative real axis.
    """
    if not t > 0:
        raise ModelError(f"time must be positive, got {t}")
    u = np.asarray(u, dtype=complex)
    if isinstance(model, VarianceGamma):
        base = 1.0 + model.nu * u
        bad = _on_cut(base) if continuation else base.real <= 0
        if np.any(bad):
            raise ModelError("VG transform requires Re(1 + nu u) > 0")
        out = -(t / model.nu) * np.log(base)
    elif isinstance(model, CGMY):
        if not continuation and np.any(u.real <= -0.5 * model.G * model.M):
            raise ModelError("CGMY transform requires Re(u) > -GM/2")
        out = t * _cgmy_exponent(model, u)
    elif isinstance(model, Heston):
        out = _heston_log_laplace(model, u, t)
    elif isinstance(model, DeterministicClock):
        out = -u * model.rate * t
    else:
        raise ModelError(f"unknown clock model {type(model).__name__}")
    # normalization holds exactly, not up to rounding in the exponent
    out = np.where(u == 0, 0.0, out)
    return out if out.ndim else out[()]


def laplace_transform(model: ClockModel, u, t: float, *, continuation: bool = False):
    """``E[exp(-u Z_t)]``.  Real ``u`` gives a real result."""
    u_arr = np.asarray(u)
    out = np.exp(log_laplace_transform(model, u_arr, t, continuation=continuation))
    if not np.iscomplexobj(u_arr):
        out = np.real(out)
    return out if np.ndim(out) else out[()]


def _cgmy_exponent(m: CGMY, u: np.ndarray) -> np.ndarray:
    # (p, q) are the roots of s^2 - (G+M)s + GM + 2u; the expression is
    # symmetric in them, so the square-root branch is irrelevant.
    half_sum = 0.5 * (m.G + m.M)
    root = np.sqrt(0.25 * (m.G - m.M) ** 2 - 2.0 * u)
    p, q = half_sum + root, half_sum - root
    # p^Y, q^Y are continued along the principal branch; only the cut matters
    if np.any(_on_cut(p)) or np.any(_on_cut(q)):
        raise ModelError("CGMY transform evaluated outside its domain of analyticity")
    return m.C * special.gamma(-m.Y) * (p**m.Y + q**m.Y - m.M**m.Y - m.G**m.Y)


def _heston_log_laplace(h: Heston, u: np.ndarray, t: float) -> np.ndarray:
    # Rearranged with g = (kappa - eta)/(kappa + eta) to stay on the
    # principal branch for complex u.
    eta = np.sqrt(2.0 * h.xi**2 * u + h.kappa**2)
    g = (h.kappa - eta) / (h.kappa + eta)
    e = np.exp(-eta * t)
    one_minus = 1.0 - g * e
    expo = 2.0 * h.kappa * h.delta / h.xi**2
    log_a = expo * (0.5 * (h.kappa - eta) * t + np.log(2.0 * eta / (h.kappa + eta)) - np.log(one_minus))
    b = -2.0 * u * h.V0 * (-np.expm1(-eta * t)) / ((h.kappa + eta) * one_minus)
    return log_a + b


def omega(model: ClockModel) -> float:
    """Mean-correcting compensator ``(1/t) log E[exp((theta + sigma^2/2) Z_t)]``."""
    if isinstance(model, Heston):
        return 0.0
    if isinstance(model, DeterministicClock):
        return (model.theta + 0.5 * model.sigma**2) * model.rate
    if isinstance(model, VarianceGamma):
        arg = 1.0 - model.nu * (model.theta + 0.5 * model.sigma**2)
        if arg <= 0:
            raise ModelError("VG compensator undefined")
        return -math.log(arg) / model.nu
    theta, sigma = model_theta_sigma(model)
    return float(np.real(log_laplace_transform(model, -(theta + 0.5 * sigma**2), 1.0)))


def normalized_inputs(model: ClockModel, market: MarketParams, contract: VanillaContract) -> tuple[float, float]:
    """``(mu, x)`` for the normalized Black-Scholes representation of the call."""
    return normalized_mu(model), adjusted_log_moneyness(model, market, contract.K, contract.T)


def normalized_mu(model: ClockModel) -> float:
    theta, sigma = model_theta_sigma(model)
    return theta / sigma**2 + 0.5


def adjusted_log_moneyness(model: ClockModel, market: MarketParams, K, T):
    """``log(S0 / (K exp((q - r + omega) T)))``, vectorised over K and T."""
    w = omega(model)
    return np.log(market.S0 / np.asarray(K, dtype=float)) - (market.q - market.r + w) * np.asarray(T, dtype=float)


def characteristic_exponent_X(model: ClockModel, z, t: float = 1.0):
    """``(1/t) log E[exp(i z X_t)]``."""
    theta, sigma = model_theta_sigma(model)
    z = np.asarray(z, dtype=complex)
    u = -(1j * z * theta - 0.5 * z**2 * sigma**2)
    return log_laplace_transform(model, u, t) / t


# --------------------------------------------------------------------------- #
# Quantiles and simulation
# --------------------------------------------------------------------------- #

def clock_moments(model: ClockModel, t: float) -> tuple[float, float]:
    """Mean and variance of ``Z_t``.

    Closed form where simple, otherwise central differences of the log
    Laplace transform at the origin.
    """
    if isinstance(model, VarianceGamma):
        return t, model.nu * t
    if isinstance(model, DeterministicClock):
        return model.rate * t, 0.0
    if isinstance(model, Heston):
        return _integrated_cir_moments(model, t)
    h = 1e-3

    def cumulant(s: float) -> float:
        return float(np.real(log_laplace_transform(model, s, t)))

    f_plus, f0, f_minus = cumulant(h), cumulant(0.0), cumulant(-h)
    mean = -(f_plus - f_minus) / (2 * h)
    var = (f_plus - 2 * f0 + f_minus) / h**2
    return mean, var


def _integrated_cir_moments(h: Heston, t: float) -> tuple[float, float]:
    # Var = (xi/kappa)^2 int_0^t E[V_u] (1 - exp(-kappa (t - u)))^2 du
    k, d, v0 = h.kappa, h.delta, h.V0
    e1, e2 = math.exp(-k * t), math.exp(-2.0 * k * t)
    mean = d * t + (v0 - d) * (1.0 - e1) / k
    flat = t - 2.0 * (1.0 - e1) / k + (1.0 - e2) / (2.0 * k)
    decay = (1.0 - e1) / k - 2.0 * t * e1 + (e1 - e2) / k
    return mean, (h.xi / k) ** 2 * (d * flat + (v0 - d) * decay)


def _gamma_quantile(shape: float, scale: float, p: float, tol: float = 1e-10) -> float:
    """Bisection for ``inf{z : F(z) >= p}`` of a gamma law."""
    mean, std = shape * scale, math.sqrt(shape) * scale
    lo, hi = 0.0, mean + 20.0 * std
    while regularized_lower_incomplete_gamma(shape, hi / scale) < p:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if regularized_lower_incomplete_gamma(shape, mid / scale) >= p:
            hi = mid
        else:
            lo = mid
    return hi


def clock_quantile(
    model: ClockModel,
    t: float,
    p: float,
    *,
    seed: int = 0,
    n_paths: int = 100_000,
    n_steps: int | None = None,
) -> float:
    """``p``-quantile of ``Z_t``.

    VG inverts the gamma CDF; Heston uses the empirical quantile of a seeded
    simulation.  CGMY has neither and raises.
    """
    if not 0.0 < p < 1.0:
        raise ModelError(f"probability must lie in (0, 1), got {p}")
    if not t > 0:
        raise ModelError(f"time must be positive, got {t}")
    if isinstance(model, VarianceGamma):
        return _gamma_quantile(t / model.nu, model.nu, p)
    if isinstance(model, DeterministicClock):
        return model.rate * t
    if isinstance(model, Heston):
        samples = simulate_heston_clock(model, t, n_paths, n_steps or default_steps(t), seed)
        return float(np.quantile(samples, p))
    raise SimulationUnavailableError(
        f"{type(model).__name__} clock has no closed-form CDF or simulator"
    )


def default_steps(t: float) -> int:
    return max(50, int(math.ceil(100.0 * t)))


def simulate_heston_clock(
    params: Heston,
    t: float,
    n_paths: int,
    n_steps: int,
    seed: int,
    *,
    strict_feller: bool = False,
) -> np.ndarray:
    """Samples of ``Z_t = int_0^t V_s ds`` for the CIR variance.

    Full-truncation Euler for ``V`` and the trapezoidal rule for the
    integral.  A Feller violation raises when ``strict_feller`` is set and
    warns otherwise (the scheme stays well defined).
    """
    if not t > 0:
        raise ModelError("time must be positive")
    if n_paths < 1:
        raise ModelError("need at least one path")
    if n_steps < 50 * t:
        raise ModelError(f"n_steps must be at least 50*t = {50 * t:g}")
    if not params.feller:
        msg = "Feller condition 2*kappa*delta >= xi^2 violated"
        if strict_feller:
            raise ModelError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    dt = t / n_steps
    sdt = math.sqrt(dt)
    k, d, x = params.kappa, params.delta, params.xi
    v = np.full(n_paths, params.V0)
    z = np.zeros(n_paths)
    for _ in range(n_steps):
        vp = np.maximum(v, 0.0)
        v_new = v + k * (d - vp) * dt + x * np.sqrt(vp) * sdt * rng.standard_normal(n_paths)
        z += 0.5 * (vp + np.maximum(v_new, 0.0)) * dt
        v = v_new
    return z


def simulate_heston_clock_at(
    params: Heston,
    times: Sequence[float],
    n_paths: int,
    seed: int,
    steps_per_unit: int = 100,
) -> dict[float, np.ndarray]:
    """One simulation recording ``Z_t`` at each of ``times`` (same scheme as
    :func:`simulate_heston_clock`)."""
    ts = sorted({float(t) for t in times})
    if not ts or ts[0] <= 0:
        raise ModelError("times must be positive")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    k, d, x = params.kappa, params.delta, params.xi
    v = np.full(n_paths, params.V0)
    z = np.zeros(n_paths)
    out: dict[float, np.ndarray] = {}
    prev = 0.0
    for t in ts:
        n = max(1, int(math.ceil((t - prev) * max(steps_per_unit, 50))))
        dt = (t - prev) / n
        sdt = math.sqrt(dt)
        for _ in range(n):
            vp = np.maximum(v, 0.0)
            v_new = v + k * (d - vp) * dt + x * np.sqrt(vp) * sdt * rng.standard_normal(n_paths)
            z += 0.5 * (vp + np.maximum(v_new, 0.0)) * dt
            v = v_new
        out[t] = z.copy()
        prev = t
    return out


def clock_cdf(model: ClockModel, t: float, z, terms: int = 32) -> np.ndarray:
    """``P(Z_t <= z)`` by fixed-Talbot inversion of ``L(u) / u``.

    The contour wraps the branch cut of the transform on the negative real
    axis, so only the analytic continuation off that cut is needed.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.zeros(z.shape)
    pos = z > 0
    if not np.any(pos):
        return out
    zp = z[pos]
    th = np.arange(1, terms) * np.pi / terms
    cot = 1.0 / np.tan(th)
    r = 2.0 * terms / (5.0 * zp)
    s = np.multiply.outer(r, th * (cot + 1j))
    sig = th + (th * cot - 1.0) * cot
    body = np.exp(s * zp[:, None]) * laplace_transform(model, s, t, continuation=True) / s
    head = 0.5 * laplace_transform(model, r, t) / r * np.exp(r * zp)
    out[pos] = r / terms * (head + (body * (1.0 + 1j * sig)).real.sum(axis=1))
    return np.clip(out, 0.0, 1.0)


def transform_quantiles(model: ClockModel, t: float, probs) -> np.ndarray:
    """Quantiles of ``Z_t`` read off the inverted transform on a dense grid."""
    probs = np.asarray(probs, dtype=float)
    mean, var = clock_moments(model, t)
    sd = math.sqrt(max(var, 0.0))
    if sd <= 1e-6 * mean:
        # a near-Dirac law; the contour inversion cannot resolve the jump
        return np.full(np.shape(probs), mean)
    hi = mean + 10.0 * sd
    while clock_cdf(model, t, hi)[0] < 1.0 - 1e-7 and hi < mean + 1e4 * sd:
        hi *= 2.0
    z = np.unique(np.concatenate([np.geomspace(mean * 1e-6, hi, 3000), np.linspace(0.0, hi, 3000)[1:]]))
    F = np.maximum.accumulate(clock_cdf(model, t, z))
    keep = np.concatenate([[True], np.diff(F) > 0])
    return np.interp(probs, F[keep], z[keep])


def representative_clock_values(
    model: ClockModel,
    times: Sequence[float],
    n_points: int = 4000,
    *,
    seed: int = 0,
    n_paths: int = 40_000,
) -> dict[float, np.ndarray]:
    """Equal-probability points of ``Z_t``: quantiles at ``(i + 1/2)/n``.

    Exact for VG and the deterministic clock.  CGMY comes from the inverted
    transform; Heston from a seeded simulation, or from the inverted
    transform when ``n_paths`` is 0.
    """
    probs = (np.arange(n_points) + 0.5) / n_points
    ts = sorted({float(t) for t in times})
    if isinstance(model, Heston) and n_paths > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sims = simulate_heston_clock_at(model, ts, n_paths, seed)
        return {t: np.quantile(sims[t], probs) for t in ts}
    out = {}
    for t in ts:
        if isinstance(model, DeterministicClock):
            out[t] = np.full(n_points, model.rate * t)
            continue
        if isinstance(model, VarianceGamma):
            out[t] = special.gammaincinv(t / model.nu, probs) * model.nu
        else:
            out[t] = transform_quantiles(model, t, probs)
    return out
