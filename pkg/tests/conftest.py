from __future__ import annotations

import sys
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria_log():
    """Collects one summary line per acceptance criterion."""
    return _CRITERIA


BUILD_SECONDS: dict = {}


@pytest.fixture(scope="session")
def iv_table():
    from tcrational.impliedvol import build_iv_table

    t0 = time.perf_counter()
    table = build_iv_table()
    BUILD_SECONDS["iv_table"] = time.perf_counter() - t0
    return table


_CACHES: dict = {}


@pytest.fixture(scope="session")
def preset_cache():
    """``get(preset, strikes=None, maturities=None)`` -> memoised PriceCache."""
    from tcrational.cli import obtain_cache
    from tcrational.storage import preset

    def get(name, strikes=None, maturities=None):
        key = (name, None if strikes is None else tuple(strikes), None if maturities is None else tuple(maturities))
        if key not in _CACHES:
            cfg = preset(name).with_grid(strikes, maturities)
            t0 = time.perf_counter()
            _CACHES[key] = obtain_cache(cfg, None)
            BUILD_SECONDS[key] = time.perf_counter() - t0
        return _CACHES[key]

    return get


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
