from __future__ import annotations

import csv
import io

import numpy as np
import pytest

from tcrational.cli import EXIT_INPUT, EXIT_IO, EXIT_OK, bench_rows, drop_max, main
from tcrational.clocks import DeterministicClock, MarketParams
from tcrational.pricer import black_scholes_call
from tcrational.storage import RunConfig, dump_config, preset, save_iv_table


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def small_config(tmp_path):
    def make(name="case-I", strikes=(0.9, 1.0, 1.1), maturities=(0.5, 1.0)):
        p = tmp_path / f"{name}.ini"
        p.write_text(dump_config(preset(name).with_grid(strikes, maturities)))
        return str(p)

    return make


@pytest.fixture(scope="module")
def table_file(tmp_path_factory, iv_table):
    p = tmp_path_factory.mktemp("iv") / "iv.json"
    save_iv_table(iv_table, p)
    return str(p)


def test_price_worked_example(capsys):
    assert main(["price", "--preset", "case-I", "--K", "1.1", "--T", "1"]) == EXIT_OK
    out = capsys.readouterr()
    row = rows_of(out.out)[0]
    assert float(row["price"]) == pytest.approx(0.021403241, abs=1e-7)
    assert float(row["mu_tc"]) == pytest.approx(-9.2596, abs=5e-5)
    assert float(row["a"]) < float(row["b"])


def test_price_put_side(capsys):
    main(["price", "--preset", "case-I", "--K", "1.1", "--T", "1"])
    call = float(rows_of(capsys.readouterr().out)[0]["price"])
    main(["price", "--preset", "case-I", "--K", "1.1", "--T", "1", "--side", "put"])
    put = float(rows_of(capsys.readouterr().out)[0]["price"])
    assert call - put == pytest.approx(np.exp(-0.01) - 1.1 * np.exp(-0.03), abs=1e-14)


def test_short_quadrature_warns(capsys):
    main(["price", "--preset", "case-I", "--K", "1.0", "--T", "0.25"])
    assert "a*d" in capsys.readouterr().err


@pytest.mark.parametrize("K", ["0", "-1", "nan"])
def test_price_rejects_bad_strike(K, capsys):
    assert main(["price", "--preset", "case-I", "--K", K, "--T", "1"]) == EXIT_INPUT
    assert "strike" in capsys.readouterr().err


def test_config_and_preset_exclusive(small_config, capsys):
    assert main(["price", "--preset", "case-I", "--config", small_config(), "--K", "1", "--T", "1"]) == EXIT_INPUT
    assert main(["price", "--K", "1", "--T", "1"]) == EXIT_INPUT


def test_bad_quadrature_override():
    assert main(["price", "--preset", "case-I", "--K", "1", "--T", "1", "--quad-l", "1"]) == EXIT_INPUT


def test_unwritable_output(tmp_path):
    out = tmp_path / "missing-dir" / "x.csv"
    assert main(["price", "--preset", "case-I", "--K", "1", "--T", "1", "--out", str(out)]) == EXIT_IO


def test_missing_config_file(tmp_path):
    assert main(["surface", "--config", str(tmp_path / "nope.ini")]) == EXIT_IO


def test_surface_ordering_and_determinism(small_config, tmp_path):
    cfg = small_config()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["surface", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["surface", "--config", cfg, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    rows = rows_of(a.read_text())
    keys = [(float(r["K"]), float(r["T"])) for r in rows]
    assert keys == sorted(keys) and len(keys) == 6
    assert all(r["error"] == "" for r in rows)


def test_single_cell_surface_equals_price(small_config, capsys):
    cfg = small_config(strikes=(1.1,), maturities=(1.0,))
    main(["surface", "--config", cfg])
    surf = float(rows_of(capsys.readouterr().out)[0]["price"])
    main(["price", "--config", cfg, "--K", "1.1", "--T", "1"])
    assert surf == float(rows_of(capsys.readouterr().out)[0]["price"])


def test_compare_fft_summary(small_config, capsys):
    assert main(["compare-fft", "--config", small_config()]) == EXIT_OK
    out = capsys.readouterr()
    diffs = [float(r["abs_diff"]) for r in rows_of(out.out)]
    assert max(diffs) <= 2e-5
    assert "max |RA - FFT|" in out.err


def test_build_cache_requires_out():
    assert main(["build-cache", "--preset", "case-I"]) == EXIT_INPUT
    assert main(["build-iv-table"]) == EXIT_INPUT


def test_cache_build_load_price(small_config, tmp_path, capsys):
    cfg = small_config()
    cache = tmp_path / "cache.json"
    assert main(["build-cache", "--config", cfg, "--out", str(cache)]) == EXIT_OK
    main(["surface", "--config", cfg])
    fresh = capsys.readouterr().out
    main(["surface", "--config", cfg, "--cache", str(cache)])
    assert capsys.readouterr().out == fresh


def test_cache_for_other_parameters(small_config, tmp_path):
    cache = tmp_path / "cache.json"
    main(["build-cache", "--config", small_config(), "--out", str(cache)])
    assert main(["surface", "--config", small_config("case-II"), "--cache", str(cache)]) == EXIT_INPUT


def test_iv_flags_negative_price(tmp_path, table_file, capsys):
    prices = tmp_path / "p.csv"
    good = black_scholes_call(1.0, 1.0, 1.0, 0.03, 0.01, 0.2)
    prices.write_text(f"K,T,price\n1.0,1.0,{good!r}\n1.0,1.0,-0.01\n")
    code = main(["iv", "--preset", "case-I", "--prices", str(prices), "--iv-table", table_file])
    assert code == EXIT_OK
    out = capsys.readouterr()
    rows = rows_of(out.out)
    assert float(rows[0]["sigma_iv"]) == pytest.approx(0.2, abs=5.6e-5)
    assert rows[1]["flag"] == "arbitrage" and rows[1]["sigma_iv"] == "nan"
    assert "no-arbitrage" in out.err


def test_iv_flat_surface(tmp_path, table_file, capsys):
    prices = tmp_path / "p.csv"
    lines = ["K,T,price"]
    for K in (0.8, 1.0, 1.2):
        for T in (0.25, 1.0, 2.5):
            lines.append(f"{K},{T},{black_scholes_call(1.0, K, T, 0.03, 0.01, 0.2)!r}")
    prices.write_text("\n".join(lines) + "\n")
    main(["iv", "--preset", "case-I", "--prices", str(prices), "--iv-table", table_file])
    sig = np.array([float(r["sigma_iv"]) for r in rows_of(capsys.readouterr().out)])
    assert np.max(np.abs(sig - 0.2)) <= 5.6e-5


def test_iv_corrupt_table(tmp_path):
    bad = tmp_path / "iv.json"
    bad.write_text("{broken")
    prices = tmp_path / "p.csv"
    prices.write_text("K,T,price\n1,1,0.08\n")
    assert main(["iv", "--preset", "case-I", "--prices", str(prices), "--iv-table", str(bad)]) == EXIT_IO


def test_iv_bad_prices_file(tmp_path, table_file):
    prices = tmp_path / "p.csv"
    prices.write_text("strike,price\n1,0.08\n")
    assert main(["iv", "--preset", "case-I", "--prices", str(prices), "--iv-table", table_file]) == EXIT_INPUT


def test_error_report_case_i(small_config, capsys):
    assert main(["error-report", "--config", small_config()]) == EXIT_OK
    text = capsys.readouterr().out
    body, summary = text.split("summary,")
    rows = rows_of(body)
    assert rows and all(float(r["a"]) < float(r["b"]) for r in rows)
    mid = max(float(r["eps_mid"]) for r in rows)
    assert mid <= 1e-4


def test_error_report_heston_few_paths(small_config, capsys):
    assert main(["error-report", "--config", small_config("case-III"), "--paths", "2000"]) == EXIT_OK
    assert "max_drop_25" in capsys.readouterr().out


def test_error_report_deterministic_clock(tmp_path, capsys):
    cfg = RunConfig(DeterministicClock(0.2), MarketParams(1.0, 0.03, 0.01), strikes=(0.9, 1.1), maturities=(1.0,))
    p = tmp_path / "det.ini"
    p.write_text(dump_config(cfg))
    assert main(["error-report", "--config", str(p)]) == EXIT_OK
    rows = rows_of(capsys.readouterr().out.split("summary,")[0])
    assert all(float(r[k]) <= 1e-8 for r in rows for k in ("eps_low", "eps_mid", "eps_high"))


def test_bench_small_shapes():
    rows = bench_rows(preset("case-I"), shapes=((3, 4), (2, 2)))
    assert [r[:2] for r in rows] == [[3, 4], [2, 2]]
    for _, _, warm, cold, fft, ratio in rows:
        assert 0 < warm <= cold and fft > 0
        assert ratio == pytest.approx(fft / warm)


def test_bench_command_writes_csv(tmp_path, monkeypatch):
    import tcrational.cli as cli

    monkeypatch.setattr(cli, "BENCH_SHAPES", ((2, 3),))
    monkeypatch.setattr(cli, "bench_rows", lambda cfg, repeats: bench_rows(cfg, ((2, 3),), repeats))
    out = tmp_path / "bench.csv"
    assert main(["bench", "--preset", "case-I", "--repeats", "1", "--out", str(out)]) == EXIT_OK
    assert rows_of(out.read_text())[0]["maturities"] == "2"


def test_drop_max():
    assert drop_max(np.arange(30.0), 25) == 4.0
    assert np.isnan(drop_max(np.arange(3.0), 25))

