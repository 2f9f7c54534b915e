"""Run configuration, named presets, fingerprints and persisted documents.

Configs are INI-style text with ``[model]``, ``[market]``, ``[grid]`` and
``[engine]`` sections.  Caches and implied-vol tables are stored as JSON
documents whose header carries a schema version and a hash of the build
configuration.  Reals are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .clocks import (
    CGMY,
    ClockModel,
    DeterministicClock,
    Heston,
    MarketParams,
    ModelError,
    VarianceGamma,
)

SCHEMA_VERSION = 1

MODEL_TYPES = {
    "vg": VarianceGamma,
    "cgmy": CGMY,
    "heston": Heston,
    "deterministic": DeterministicClock,
}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class DocumentError(OSError):
    """A persisted document cannot be read back."""


def model_type_name(model: ClockModel) -> str:
    for name, cls in MODEL_TYPES.items():
        if isinstance(model, cls):
            return name
    raise ConfigError(f"unsupported model {type(model).__name__}")


def fingerprint(obj: Any) -> str:
    """SHA-256 over the type name and full-precision field values."""
    if dataclasses.is_dataclass(obj):
        payload = {"type": type(obj).__name__, **{f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}}
    else:
        payload = obj
    text = json.dumps(payload, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------- #
# Config
# --------------------------------------------------------------------------- #

PRESET_STRIKES = tuple(round(0.8 + 0.01 * i, 2) for i in range(41))
PRESET_MATURITIES = (0.25, 0.5, 1.0, 1.5, 2.0, 2.5)


@dataclass(frozen=True)
class EngineConfig:
    degree_start: int = 6
    degree_max: int = 8
    threshold: float = 1e-6
    correction_degree: int = 7
    quad_l: int = 500
    quad_c: float = 0.0
    quad_d: float = 7000.0
    truncation: str = "search"
    cache: bool = True
    n_slices: int = 30
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ClockModel
    market: MarketParams
    strikes: tuple[float, ...] = PRESET_STRIKES
    maturities: tuple[float, ...] = PRESET_MATURITIES
    engine: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if not self.strikes or not self.maturities:
            raise ConfigError("strike and maturity grids must be nonempty")
        if any(not (k > 0 and math.isfinite(k)) for k in self.strikes):
            raise ConfigError("strikes must be positive")
        if any(not (t > 0 and math.isfinite(t)) for t in self.maturities):
            raise ConfigError("maturities must be positive")
        object.__setattr__(self, "strikes", tuple(sorted(float(k) for k in self.strikes)))
        object.__setattr__(self, "maturities", tuple(sorted(float(t) for t in self.maturities)))

    def with_engine(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, engine=dataclasses.replace(self.engine, **changes))

    def with_grid(self, strikes=None, maturities=None) -> "RunConfig":
        return dataclasses.replace(
            self,
            strikes=self.strikes if strikes is None else tuple(strikes),
            maturities=self.maturities if maturities is None else tuple(maturities),
        )

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()


_MARKET = MarketParams(1.0, 0.03, 0.01)

PRESETS: dict[str, RunConfig] = {
    "case-I": RunConfig(VarianceGamma(0.1213, 0.1686, -0.1436), _MARKET),
    "case-II": RunConfig(VarianceGamma(0.178753, 0.13317, -0.30649), _MARKET),
    "case-III": RunConfig(Heston(0.87, 0.07, 0.34, 0.07), _MARKET),
    "case-IV": RunConfig(Heston(0.9, 0.04, 0.3, 0.04), _MARKET),
    "case-V": RunConfig(CGMY(1.0, 5.0, 10.0, 0.5), _MARKET),
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_list(text: str) -> tuple[float, ...]:
    """``a, b, c`` or ``start:stop:step`` (inclusive stop)."""
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ConfigError("range step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9))
        return tuple(round(start + i * step, 12) for i in range(n + 1))
    return tuple(float(p) for p in text.replace(",", " ").split())


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep S0 distinct from s0
    return parser


def dump_config(cfg: RunConfig) -> str:
    parser = _parser()
    model = {"type": model_type_name(cfg.model)}
    model.update({f.name: _fmt(getattr(cfg.model, f.name)) for f in dataclasses.fields(cfg.model)})
    parser["model"] = model
    parser["market"] = {f.name: _fmt(getattr(cfg.market, f.name)) for f in dataclasses.fields(cfg.market)}
    parser["grid"] = {
        "strikes": ", ".join(repr(k) for k in cfg.strikes),
        "maturities": ", ".join(repr(t) for t in cfg.maturities),
    }
    parser["engine"] = {f.name: _fmt(getattr(cfg.engine, f.name)) for f in dataclasses.fields(cfg.engine)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(text: str) -> RunConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    for sec in ("model", "market"):
        if sec not in parser:
            raise ConfigError(f"config lacks a [{sec}] section")
    m = dict(parser["model"])
    kind = m.pop("type", None)
    if kind not in MODEL_TYPES:
        raise ConfigError(f"model type must be one of {sorted(MODEL_TYPES)}, got {kind!r}")
    cls = MODEL_TYPES[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(m) - names
    if extra:
        raise ConfigError(f"unknown {kind} parameters: {sorted(extra)}")
    try:
        model = cls(**{k: float(v) for k, v in m.items()})
        market = MarketParams(**{k: float(v) for k, v in parser["market"].items()})
    except (TypeError, ValueError, ModelError) as exc:
        raise ConfigError(str(exc)) from exc
    kw: dict[str, Any] = {}
    if "grid" in parser:
        g = parser["grid"]
        try:
            for key in ("strikes", "maturities"):
                if key in g:
                    kw[key] = _parse_list(g[key])
        except ValueError as exc:
            raise ConfigError(f"bad grid list: {exc}") from exc
    engine = EngineConfig()
    if "engine" in parser:
        changes = {}
        for f in dataclasses.fields(EngineConfig):
            if f.name in parser["engine"]:
                raw = parser["engine"][f.name]
                if f.type in ("bool", bool):
                    changes[f.name] = parser["engine"].getboolean(f.name)
                elif f.type in ("int", int):
                    changes[f.name] = int(raw)
                elif f.type in ("float", float):
                    changes[f.name] = float(raw)
                else:
                    changes[f.name] = raw.strip()
        engine = dataclasses.replace(engine, **changes)
    return RunConfig(model, market, engine=engine, **kw)


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #

def fmt_real(v: float) -> str:
    """Scientific notation with 17 significant digits."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{float(v):.16e}"


def write_csv(rows: Sequence[Sequence[Any]], header: Sequence[str], path: Optional[Path] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_real(v) if isinstance(v, (float, np.floating)) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, newline="")
    return text


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- #
# Documents
# --------------------------------------------------------------------------- #

def _complex_pairs(arr) -> list[list[float]]:
    return [[float(z.real), float(z.imag)] for z in np.asarray(arr, dtype=complex)]


def _from_pairs(pairs) -> np.ndarray:
    return np.array([complex(re, im) for re, im in pairs], dtype=complex)


def write_document(kind: str, config_hash: str, body: dict, path: Path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "config_hash": config_hash, **body}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_document(kind: str, path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError) as exc:
        raise DocumentError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DocumentError(
            f"{path} is not a valid document (expected schema_version {SCHEMA_VERSION}): {exc}"
        ) from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        found = doc.get("schema_version") if isinstance(doc, dict) else None
        raise DocumentError(f"{path}: unsupported schema_version {found!r}, expected {SCHEMA_VERSION}")
    if doc.get("kind") != kind:
        raise DocumentError(f"{path}: expected a {kind} document, found {doc.get('kind')!r}")
    return doc


def save_cache(cache, path: Path, config_hash: str = "") -> None:
    from .pricer import PriceCache

    if not isinstance(cache, PriceCache):
        raise TypeError(f"expected a PriceCache, got {type(cache).__name__}")
    entries = []
    for node in cache.nodes:
        s = node.slice
        corr = s.pf.correction
        entries.append(
            {
                "x": s.x,
                "domain": list(s.domain),
                "A0": s.pf.constant,
                "residues": _complex_pairs(s.pf.residues),
                "poles": _complex_pairs(s.pf.poles),
                "angles": [float(a) for a in s.pf.angles],
                "correction": None
                if corr is None
                else {"coefficients": [float(c) for c in corr.coefficients], "domain": list(corr.domain)},
                "fit_error": s.fit_error,
                "degree": s.degree,
                "t_window": list(node.t_window),
                "score": node.score,
            }
        )
    body = {
        "model": {"type": model_type_name(cache.model), **dataclasses.asdict(cache.model)},
        "market": dataclasses.asdict(cache.market),
        "model_fingerprint": cache.model_fingerprint,
        "market_fingerprint": cache.market_fingerprint,
        "mu": cache.mu,
        "sigma": cache.sigma,
        "quadrature": {
            "L": cache.quad.count - cache.quad.tail_nodes,
            "c": cache.quad.interval[0],
            "d": cache.quad.interval[1],
            "tail": cache.quad.tail_nodes,
        },
        "policy": dataclasses.asdict(cache.policy),
        "x_range": list(cache.x_range),
        "entries": entries,
    }
    write_document("price-cache", config_hash, body, path)


def load_cache(path: Path):
    from .numerics import ChebyshevSeries, PartialFractionForm
    from .pricer import CacheNode, DegreePolicy, PriceCache, _make_slice, default_quadrature

    doc = read_document("price-cache", path)
    try:
        md = dict(doc["model"])
        model = MODEL_TYPES[md.pop("type")](**md)
        market = MarketParams(**doc["market"])
        q = doc["quadrature"]
        quad = default_quadrature(q["L"], q["c"], q["d"], q["tail"])
        pol = dict(doc["policy"])
        pol["ray_angles"] = tuple(pol["ray_angles"])
        policy = DegreePolicy(**pol)
        nodes = []
        for e in doc["entries"]:
            corr = e["correction"]
            pf = PartialFractionForm(
                e["A0"],
                _from_pairs(e["residues"]),
                _from_pairs(e["poles"]),
                None if corr is None else ChebyshevSeries(np.array(corr["coefficients"]), tuple(corr["domain"])),
                np.array(e["angles"], dtype=float),
            )
            s = _make_slice(e["x"], doc["mu"], e["domain"], pf, quad, e["fit_error"], e["degree"], policy.threshold)
            nodes.append(CacheNode(s, tuple(e["t_window"]), e["score"]))
        cache = PriceCache(
            model,
            market,
            doc["mu"],
            doc["sigma"],
            tuple(nodes),
            quad,
            policy,
            tuple(doc["x_range"]),
            doc["model_fingerprint"],
            doc["market_fingerprint"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DocumentError(f"{path}: malformed price-cache entry: {exc}") from exc
    if cache.model_fingerprint != fingerprint(model) or cache.market_fingerprint != fingerprint(market):
        raise DocumentError(f"{path}: fingerprint does not match the stored parameters")
    return cache


def iv_table_hash() -> str:
    """Hash of the table build configuration (grid, degrees, bounds)."""
    from . import impliedvol as iv

    return fingerprint(
        {
            "x": [float(v) for v in iv.table_x_grid()],
            "degrees": [7, 8, 9],
            "bounds": [iv.BOUND_FINE, iv.BOUND_COARSE, iv.FINE_CUTOFF],
        }
    )


def save_iv_table(table, path: Path) -> None:
    entries = [
        {
            "x": e.x,
            "degree": e.degree,
            "numerator": [float(v) for v in e.approximant.numerator_cheb],
            "denominator": [float(v) for v in e.approximant.denominator_cheb],
            "s_domain": list(e.approximant.domain),
            "bounds": list(e.bounds),
            "max_error": e.max_error,
        }
        for e in table.entries
    ]
    write_document("iv-table", iv_table_hash(), {"entries": entries}, path)


def load_iv_table(path: Path):
    from .impliedvol import ImpliedVolError, IVEntry, IVTable
    from .numerics import NumericsError, RationalApproximant

    doc = read_document("iv-table", path)
    try:
        entries = tuple(
            IVEntry(
                e["x"],
                e["degree"],
                RationalApproximant(np.array(e["numerator"]), np.array(e["denominator"]), tuple(e["s_domain"])),
                tuple(e["bounds"]),
                e["max_error"],
            )
            for e in doc["entries"]
        )
        return IVTable(entries)
    except (KeyError, TypeError, ValueError, NumericsError, ImpliedVolError) as exc:
        raise DocumentError(f"{path}: malformed iv-table entry: {exc}") from exc
