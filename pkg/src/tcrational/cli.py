"""Command-line entry point: ``tcrational <command> [options]``.

Exit codes: 0 success (possibly with per-cell warnings), 2 invalid input,
3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import impliedvol as iv
from .clocks import (
    CGMY,
    DeterministicClock,
    Heston,
    ModelError,
    VanillaContract,
    VarianceGamma,
    model_theta_sigma,
    representative_clock_values,
    simulate_heston_clock_at,
)
from .fourier import FourierError, fft_surface
from .numerics import NumericsError
from .pricer import (
    CacheError,
    DegreePolicy,
    PriceCache,
    PricingError,
    build_cache,
    default_quadrature,
    error_report,
    price_call_record,
    price_grid_with_cache,
    put_from_call,
    select_truncation,
    vg_variance_density,
)
from .storage import (
    ConfigError,
    DocumentError,
    RunConfig,
    fmt_real,
    load_cache,
    load_config,
    load_iv_table,
    preset,
    read_csv,
    save_cache,
    save_iv_table,
    write_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

BENCH_SHAPES = ((41, 7), (7, 41), (100, 100), (300, 300), (300, 5), (5, 300))


class UsageError(ValueError):
    """Bad command-line arguments."""


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #

def resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise DocumentError(f"cannot read config {args.config}: {exc}") from exc
        cfg = load_config(text)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise UsageError("a --config or --preset is required")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.quad_l is not None:
        changes["quad_l"] = args.quad_l
    if args.quad_d is not None:
        changes["quad_d"] = args.quad_d
    if args.degree_max is not None:
        changes["degree_max"] = args.degree_max
    cfg = cfg.with_engine(**changes) if changes else cfg
    e = cfg.engine
    if e.quad_l < 2 or not e.quad_d > e.quad_c:
        raise ConfigError("quadrature needs L >= 2 and d > c")
    if not 1 <= e.degree_start <= e.degree_max:
        raise ConfigError("degree range must satisfy 1 <= start <= max")
    if e.truncation not in ("search", "quantile"):
        raise ConfigError(f"truncation must be 'search' or 'quantile', got {e.truncation!r}")
    return cfg


def engine_parts(cfg: RunConfig):
    e = cfg.engine
    policy = DegreePolicy(
        start=e.degree_start, max_degree=e.degree_max, threshold=e.threshold, correction_degree=e.correction_degree
    )
    return policy, default_quadrature(e.quad_l, e.quad_c, e.quad_d)


def emit(text: str, out: Optional[str]) -> None:
    if out:
        try:
            Path(out).write_text(text, newline="")
        except OSError as exc:
            raise DocumentError(f"cannot write {out}: {exc}") from exc
    else:
        sys.stdout.write(text)


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------- #
# pricing helpers
# --------------------------------------------------------------------------- #

def direct_record(cfg: RunConfig, K: float, T: float):
    policy, quad = engine_parts(cfg)
    contract = VanillaContract(K, T)
    domain = None
    if cfg.engine.truncation == "quantile":
        _, sigma = model_theta_sigma(cfg.model)
        domain = select_truncation(cfg.model, cfg.market, sigma, T, T, seed=cfg.engine.seed, policy=policy, quad=quad)
    return price_call_record(cfg.model, cfg.market, contract, domain=domain, policy=policy, quad=quad, seed=cfg.engine.seed)


def obtain_cache(cfg: RunConfig, cache_path: Optional[str]) -> PriceCache:
    if cache_path and Path(cache_path).exists():
        cache = load_cache(Path(cache_path))
        if cache.model != cfg.model or cache.market != cfg.market:
            raise ConfigError(f"cache {cache_path} was built for different parameters")
        return cache
    policy, quad = engine_parts(cfg)
    contracts = [VanillaContract(k, t) for k in cfg.strikes for t in cfg.maturities]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return build_cache(
            cfg.model, cfg.market, contracts, n_slices=cfg.engine.n_slices, policy=policy, quad=quad, seed=cfg.engine.seed
        )


def price_surface(cfg: RunConfig, cache_path: Optional[str] = None):
    """Call prices over the config grid plus a per-cell error message array."""
    Ks, Ts = cfg.strikes, cfg.maturities
    prices = np.full((len(Ks), len(Ts)), np.nan)
    errors = np.full(prices.shape, "", dtype=object)
    single = len(Ks) * len(Ts) == 1
    if cfg.engine.cache and not single:
        cache = obtain_cache(cfg, cache_path)
        for j, T in enumerate(Ts):
            try:
                prices[:, j] = price_grid_with_cache(cache, Ks, [T])[:, 0]
            except CacheError as exc:
                errors[:, j] = f"cache: {exc}"
    todo = [(i, j) for i in range(len(Ks)) for j in range(len(Ts)) if not np.isfinite(prices[i, j])]

    def one(cell):
        i, j = cell
        try:
            return direct_record(cfg, Ks[i], Ts[j]).price, ""
        except (PricingError, NumericsError, ModelError) as exc:
            return math.nan, f"direct: {exc}"

    with ThreadPoolExecutor(max_workers=4) as pool:
        for (i, j), (p, msg) in zip(todo, pool.map(one, todo)):
            prices[i, j] = p
            if msg:
                errors[i, j] = f"{errors[i, j]}; {msg}" if errors[i, j] else msg
            elif errors[i, j]:
                errors[i, j] = "priced directly after cache miss"
    bad = ~np.isfinite(prices)
    if np.all(bad):
        raise PricingError("no cell could be priced")
    for i, j in zip(*np.nonzero(bad)):
        warn(f"K={Ks[i]:g} T={Ts[j]:g}: {errors[i, j]}")
    return prices, errors


def obtain_iv_table(path: Optional[str]) -> iv.IVTable:
    if path and Path(path).exists():
        return load_iv_table(Path(path))
    return iv.build_iv_table()


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

def cmd_price(args) -> int:
    cfg = resolve_config(args)
    if not (args.K > 0 and math.isfinite(args.K)):
        raise UsageError(f"strike must be positive, got {args.K}")
    if not (args.T > 0 and math.isfinite(args.T)):
        raise UsageError(f"maturity must be positive, got {args.T}")
    rec = direct_record(cfg, args.K, args.T)
    a_d = rec.domain[0] * cfg.engine.quad_d
    if a_d < 25:
        warn(f"a*d = {a_d:.3g} < 25: the quadrature interval may be too short for e^(-a v) to vanish")
    price = rec.price
    if args.side == "put":
        price = float(put_from_call(price, cfg.market, args.K, args.T))
    header = ["K", "T", "side", "price", "mu_tc", "x_tc", "a", "b", "fit_error", "degree"]
    row = [args.K, args.T, args.side, price, rec.mu, rec.x, rec.domain[0], rec.domain[1], rec.fit_error, rec.degree]
    emit(write_csv([row], header), args.out)
    return EXIT_OK


def cmd_surface(args) -> int:
    cfg = resolve_config(args)
    prices, errors = price_surface(cfg, args.cache)
    rows = [
        [K, T, prices[i, j], errors[i, j]]
        for i, K in enumerate(cfg.strikes)
        for j, T in enumerate(cfg.maturities)
    ]
    emit(write_csv(rows, ["K", "T", "price", "error"]), args.out)
    return EXIT_OK


def cmd_compare_fft(args) -> int:
    cfg = resolve_config(args)
    prices, errors = price_surface(cfg, args.cache)
    fft = fft_surface(cfg.model, cfg.market, cfg.strikes, cfg.maturities)
    diff = np.abs(prices - fft)
    rows = [
        [K, T, prices[i, j], fft[i, j], diff[i, j], errors[i, j]]
        for i, K in enumerate(cfg.strikes)
        for j, T in enumerate(cfg.maturities)
    ]
    emit(write_csv(rows, ["K", "T", "ra", "fft", "abs_diff", "error"]), args.out)
    i, j = np.unravel_index(np.nanargmax(diff), diff.shape)
    print(
        f"max |RA - FFT| = {fmt_real(diff[i, j])} at K={cfg.strikes[i]:g}, T={cfg.maturities[j]:g}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_iv(args) -> int:
    cfg = resolve_config(args)
    if args.prices:
        try:
            table_rows = read_csv(Path(args.prices))
            K = np.array([float(r["K"]) for r in table_rows])
            T = np.array([float(r["T"]) for r in table_rows])
            P = np.array([float(r["price"]) for r in table_rows])
        except OSError as exc:
            raise DocumentError(f"cannot read prices {args.prices}: {exc}") from exc
        except (KeyError, ValueError) as exc:
            raise UsageError(f"prices file needs numeric K, T, price columns: {exc}") from exc
    else:
        prices, _ = price_surface(cfg, args.cache)
        K = np.repeat(np.array(cfg.strikes), len(cfg.maturities))
        T = np.tile(np.array(cfg.maturities), len(cfg.strikes))
        P = prices.ravel()
    table = obtain_iv_table(args.iv_table)
    m = cfg.market
    sigma, fallback, invalid = iv.implied_vol_points(table, P, m.S0, K, T, m.r, m.q)
    for k in np.nonzero(invalid)[0]:
        warn(f"K={K[k]:g} T={T[k]:g}: price {float(P[k])!r} violates no-arbitrage bounds")
    rows = [
        [K[k], T[k], P[k], sigma[k], int(fallback[k]), "arbitrage" if invalid[k] else ""]
        for k in range(K.size)
    ]
    emit(write_csv(rows, ["K", "T", "price", "sigma_iv", "fallback", "flag"]), args.out)
    return EXIT_OK


def cmd_build_cache(args) -> int:
    cfg = resolve_config(args)
    out = args.out or args.cache
    if not out:
        raise UsageError("build-cache needs --out")
    cache = obtain_cache(cfg, None)
    try:
        save_cache(cache, Path(out), config_hash=cfg.digest())
    except OSError as exc:
        raise DocumentError(f"cannot write {out}: {exc}") from exc
    print(f"{len(cache.nodes)} slices at {len(cache.x_grid)} x values -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_build_iv_table(args) -> int:
    out = args.out or args.iv_table
    if not out:
        raise UsageError("build-iv-table needs --out")
    table = iv.build_iv_table()
    try:
        save_iv_table(table, Path(out))
    except OSError as exc:
        raise DocumentError(f"cannot write {out}: {exc}") from exc
    errs = np.array([e.max_error for e in table.entries])
    print(
        f"{len(table.entries)} entries, max error {errs.max():.3g}, median {np.median(errs):.3g} -> {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def bench_rows(cfg: RunConfig, shapes=BENCH_SHAPES, repeats: int = 1):
    """Timings per (maturities, strikes) shape: RA with a warm cache, RA cold, FFT.

    One cache spanning every shape's grid is built once; the cold time is its
    build time plus the warm pricing time.
    """
    k_lo, k_hi = min(cfg.strikes), max(cfg.strikes)
    t_lo, t_hi = min(cfg.maturities), max(cfg.maturities)
    grids = [(np.linspace(t_lo, t_hi, nT), np.linspace(k_lo, k_hi, nK)) for nT, nK in shapes]
    span = cfg.with_grid(strikes=np.linspace(k_lo, k_hi, 5), maturities=np.linspace(t_lo, t_hi, 5))
    t0 = time.perf_counter()
    cache = obtain_cache(span, None)
    build = time.perf_counter() - t0
    rows = []
    for (nT, nK), (Ts, Ks) in zip(shapes, grids):
        warm = _best_time(lambda: price_grid_with_cache(cache, Ks, Ts), repeats)
        fft = _best_time(lambda: fft_surface(cfg.model, cfg.market, Ks, Ts), repeats)
        rows.append([nT, nK, warm, build + warm, fft, fft / warm])
    return rows


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    rows = bench_rows(cfg, repeats=args.repeats)
    header = ["maturities", "strikes", "ra_cache_s", "ra_cold_s", "fft_s", "fft_over_ra_cache"]
    emit(write_csv(rows, header), args.out)
    return EXIT_OK


def clock_law(cfg: RunConfig, sigma: float, seed: int, n_paths: int):
    """Map T -> density or samples of ``sigma^2 Z_T`` for the error report."""
    model = cfg.model
    Ts = list(cfg.maturities)
    if isinstance(model, VarianceGamma):
        return {T: vg_variance_density(model, T) for T in Ts}
    if isinstance(model, DeterministicClock):
        return {T: np.array([sigma**2 * model.rate * T]) for T in Ts}
    if isinstance(model, Heston):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sims = simulate_heston_clock_at(model, Ts, n_paths, seed)
        return {T: sigma**2 * sims[T] for T in Ts}
    if isinstance(model, CGMY):
        reps = representative_clock_values(model, Ts, n_points=n_paths // 10 or 1, seed=seed)
        return {T: sigma**2 * reps[T] for T in Ts}
    raise ConfigError(f"no clock law available for {type(model).__name__}")


def drop_max(values: np.ndarray, k: int) -> float:
    """Largest value after discarding the ``k`` largest."""
    v = np.sort(np.asarray(values, dtype=float))
    return float(v[-k - 1]) if v.size > k else math.nan


def cmd_error_report(args) -> int:
    cfg = resolve_config(args)
    cache = obtain_cache(cfg, args.cache)
    _, sigma = model_theta_sigma(cfg.model)
    law = clock_law(cfg, sigma, cfg.engine.seed, args.paths)
    rows = []
    per_slice = []
    for node in cache.nodes:
        served = [T for T in cfg.maturities if node.serves(T)]
        if not served:
            continue
        worst = np.zeros(3)
        for T in served:
            eps = error_report(node.slice, cfg.model, sigma, T, law[T])
            worst = np.maximum(worst, eps)
            a, b = node.slice.domain
            rows.append([node.slice.x, a, b, T, *eps])
        per_slice.append(worst)
    if not per_slice:
        raise PricingError("no cached slice serves the configured maturities")
    per_slice = np.array(per_slice)
    text = write_csv(rows, ["x", "a", "b", "T", "eps_low", "eps_mid", "eps_high"])
    summary = [
        ["max", *per_slice.max(axis=0)],
        ["max_drop_25", *(drop_max(per_slice[:, k], 25) for k in range(3))],
    ]
    text += write_csv(summary, ["summary", "eps_low", "eps_mid", "eps_high"])
    emit(text, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #

COMMANDS = {
    "price": cmd_price,
    "surface": cmd_surface,
    "compare-fft": cmd_compare_fft,
    "iv": cmd_iv,
    "build-cache": cmd_build_cache,
    "build-iv-table": cmd_build_iv_table,
    "bench": cmd_bench,
    "error-report": cmd_error_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--preset", choices=["case-I", "case-II", "case-III", "case-IV", "case-V"])
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int)
    common.add_argument("--cache", help="price cache document (loaded if present)")
    common.add_argument("--iv-table", help="implied-vol table document (loaded if present)")
    common.add_argument("--quad-l", type=int, help="Gauss-Legendre node count")
    common.add_argument("--quad-d", type=float, help="upper end of the quadrature interval")
    common.add_argument("--degree-max", type=int, help="largest rational degree tried")

    parser = argparse.ArgumentParser(prog="tcrational", description="Option pricing on stochastic clocks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("price", parents=[common], help="price one contract directly")
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--side", choices=["call", "put"], default="call")
    sub.add_parser("surface", parents=[common], help="prices over the config grid")
    sub.add_parser("compare-fft", parents=[common], help="|RA - FFT| over the config grid")
    p = sub.add_parser("iv", parents=[common], help="implied-vol surface")
    p.add_argument("--prices", help="CSV with K, T, price columns (default: price the config grid)")
    sub.add_parser("build-cache", parents=[common], help="fit and store a price cache")
    sub.add_parser("build-iv-table", parents=[common], help="fit and store the implied-vol table")
    p = sub.add_parser("bench", parents=[common], help="timings against the FFT route")
    p.add_argument("--repeats", type=int, default=3)
    p = sub.add_parser("error-report", parents=[common], help="region errors per cached slice")
    p.add_argument("--paths", type=int, default=100_000, help="simulation paths (Heston, CGMY)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (DocumentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (iv.TableFitError, FourierError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ModelError, iv.ImpliedVolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main_exit() -> None:
    sys.exit(main())
