import json
import os
import time
import tracemalloc

import numpy as np
import pytest

from mfgtrade import InventoryLaw, MissingInputError, PanelError, SimConfig, simulate_panel
from mfgtrade.core.params import covariance_study_example, inventory_covariance_example
from mfgtrade.market_sim import MarketPanel
from mfgtrade.panel_io import HEADER, atomic_write_text, export_panel, ingest_panel, panel_csv_text, read_metadata


@pytest.fixture(scope="module")
def panel():
    cfg = SimConfig(params=covariance_study_example(), law=InventoryLaw(Gamma=inventory_covariance_example(1e4)),
                    n_days=40, n_bins=25, seed=3)
    p = simulate_panel(cfg)
    p.assets = ["AAA", "BBB", "CCC"]
    return p


def write(tmp_path, panel, **kw):
    csv_path, meta_path = tmp_path / "p.csv", tmp_path / "p.json"
    export_panel(panel, csv_path, meta_path, **kw)
    return csv_path, meta_path


def test_round_trip_is_bit_identical(tmp_path, panel):
    csv_path, meta_path = write(tmp_path, panel, scenario_hash="abc")
    back = ingest_panel(csv_path, meta_path)
    assert back.equals(panel)
    assert np.array_equal(back.prices, panel.prices) and np.array_equal(back.net_flows, panel.net_flows)
    assert read_metadata(meta_path)["scenario_hash"] == "abc"


def test_round_trip_without_flows(tmp_path, panel):
    bare = MarketPanel(prices=panel.prices, bin_times=panel.bin_times, assets=panel.assets)
    back = ingest_panel(*write(tmp_path, bare))
    assert back.net_flows is None and back.equals(bare)


def test_export_is_deterministic(panel):
    assert panel_csv_text(panel) == panel_csv_text(panel)


def test_row_layout(panel):
    lines = panel_csv_text(panel).splitlines()
    assert lines[0] == ",".join(HEADER)
    assert lines[1].startswith("0,0,AAA,100.0,") and lines[1].endswith(",")
    day0_bin1 = lines[1 + 3].split(",")
    assert day0_bin1[:3] == ["0", "1", "AAA"] and float(day0_bin1[4]) == panel.net_flows[0, 0, 0]
    assert len(lines) == 1 + 40 * 26 * 3


def corrupt(tmp_path, panel, edit):
    csv_path, meta_path = write(tmp_path, panel)
    lines = csv_path.read_text().splitlines(keepends=True)
    edit(lines)
    csv_path.write_text("".join(lines))
    return csv_path, meta_path


@pytest.mark.parametrize("edit,line,match", [
    (lambda L: L.__setitem__(0, "day,bin,asset,price\n"), 1, "header"),
    (lambda L: L.__setitem__(5, "0,1,BBB,1.0\n"), 6, "5 fields"),
    (lambda L: L.__setitem__(5, "0,1,BBB,abc,1.0\n"), 6, "non-numeric"),
    (lambda L: L.__setitem__(5, "0,1,BBB,101.0,xyz\n"), 6, "net_volume"),
    (lambda L: L.__setitem__(5, "0,1,ZZZ,101.0,1.0\n"), 6, "unknown asset"),
    (lambda L: L.__setitem__(5, "0,99,BBB,101.0,1.0\n"), 6, "out of range"),
    (lambda L: L.__setitem__(5, "0,1,BBB,inf,1.0\n"), 6, "finite"),
    (lambda L: L.insert(6, L[5]), 7, "duplicate"),
    (lambda L: L.__setitem__(5, "0,1,BBB,101.0,\n"), 6, "missing on others"),
])
def test_malformed_rows_name_the_line(tmp_path, panel, edit, line, match):
    csv_path, meta_path = corrupt(tmp_path, panel, edit)
    with pytest.raises(PanelError, match=match) as info:
        ingest_panel(csv_path, meta_path)
    assert info.value.line == line


def test_missing_cell_and_missing_day(tmp_path, panel):
    csv_path, meta_path = corrupt(tmp_path, panel, lambda L: L.pop(8))
    with pytest.raises(PanelError, match="missing cell"):
        ingest_panel(csv_path, meta_path)
    csv_path, meta_path = corrupt(tmp_path, panel, lambda L: L.__delitem__(slice(1 + 26 * 3 * 5, 1 + 26 * 3 * 6)))
    with pytest.raises(PanelError, match="missing days"):
        ingest_panel(csv_path, meta_path)


def test_missing_files(tmp_path, panel):
    csv_path, meta_path = write(tmp_path, panel)
    with pytest.raises(MissingInputError):
        ingest_panel(tmp_path / "nope.csv", meta_path)
    with pytest.raises(MissingInputError):
        ingest_panel(csv_path, tmp_path / "nope.json")
    meta_path.write_text(json.dumps({"assets": ["AAA"]}))
    with pytest.raises(PanelError, match="bin_times"):
        ingest_panel(csv_path, meta_path)


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write_text(target, "one\n")
    atomic_write_text(target, "two\n")
    assert target.read_text() == "two\n"
    assert os.listdir(tmp_path) == ["out.txt"]


@pytest.mark.slow
def test_desk_scale_file_ingests_in_bounded_memory(tmp_path):
    # 176 assets x 55 bins x 252 days, written row by row
    n_days, M, d = 252, 55, 176
    assets = [f"S{i:03d}" for i in range(d)]
    csv_path, meta_path = tmp_path / "big.csv", tmp_path / "big.json"
    meta_path.write_text(json.dumps({"bin_times": list(np.linspace(0, 1, M + 1)), "assets": assets, "n_days": n_days}))
    rng = np.random.default_rng(0)
    with open(csv_path, "w") as fh:
        fh.write(",".join(HEADER) + "\n")
        for day in range(n_days):
            P = np.round(100 + rng.normal(size=(M + 1, d)), 4)
            V = np.round(rng.normal(size=(M, d)) * 1e3)
            rows = [f"{day},0,{a},{P[0, i]}," for i, a in enumerate(assets)]
            for k in range(1, M + 1):
                rows += [f"{day},{k},{a},{P[k, i]},{V[k - 1, i]}" for i, a in enumerate(assets)]
            fh.write("\n".join(rows) + "\n")
    file_bytes = os.path.getsize(csv_path)
    dense_bytes = 2 * n_days * (M + 1) * d * 8
    tracemalloc.start()
    t0 = time.perf_counter()
    panel = ingest_panel(csv_path, meta_path)
    elapsed = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert panel.prices.shape == (n_days, M + 1, d) and panel.net_flows.shape == (n_days, M, d)
    # streaming: peak memory tracks the dense arrays, not the file size
    assert peak < 1.5 * dense_bytes and peak < file_bytes
    print(f"ingested {file_bytes / 1e6:.0f} MB in {elapsed:.1f} s, peak {peak / 1e6:.0f} MB")
