"""Panel CSV export and streaming ingestion.

Row format: ``day,bin,asset,price,net_volume``.  Bin 0 carries the opening
price and an empty volume; bin k >= 1 carries the price at the end of bin k
and the net volume traded during it.  Bin times, asset names and units live
in a JSON sidecar.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

from .errors import MissingInputError, PanelError
from .market_sim import MarketPanel

HEADER = ["day", "bin", "asset", "price", "net_volume"]


def atomic_write_text(path, text: str):
    """Write ``text`` to ``path`` through a temp file and a rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def panel_csv_text(panel: MarketPanel) -> str:
    out = io.StringIO()
    out.write(",".join(HEADER) + "\n")
    flows = panel.net_flows
    for day in range(panel.n_days):
        P = panel.prices[day].tolist()
        F = None if flows is None else flows[day].tolist()
        lines = []
        for k in range(panel.n_bins + 1):
            for i, name in enumerate(panel.assets):
                # repr is the shortest string that round-trips the double
                vol = "" if (F is None or k == 0) else repr(F[k - 1][i])
                lines.append(f"{day},{k},{name},{repr(P[k][i])},{vol}\n")
        out.write("".join(lines))
    return out.getvalue()


def panel_metadata(panel: MarketPanel, scenario_hash: str | None = None) -> dict:
    meta = {
        "bin_times": [float(t) for t in panel.bin_times],
        "assets": list(panel.assets),
        "units": dict(panel.units),
        "n_days": int(panel.n_days),
    }
    if scenario_hash is not None:
        meta["scenario_hash"] = scenario_hash
    return meta


def export_panel(panel: MarketPanel, csv_path, metadata_path, scenario_hash: str | None = None):
    atomic_write_text(csv_path, panel_csv_text(panel))
    atomic_write_text(metadata_path, json.dumps(panel_metadata(panel, scenario_hash), indent=2, sort_keys=True) + "\n")


def read_metadata(metadata_path) -> dict:
    try:
        with open(metadata_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingInputError(f"metadata file not found: {metadata_path}") from exc
    except json.JSONDecodeError as exc:
        raise PanelError(f"metadata is not valid JSON: {exc}") from exc
    for key in ("bin_times", "assets"):
        if key not in meta:
            raise PanelError(f"metadata lacks '{key}'")
    return meta


def ingest_panel(csv_path, metadata_path) -> MarketPanel:
    """Read a panel CSV row by row into dense arrays.

    Every (day, bin, asset) cell must appear exactly once.  Volumes must be
    present for all bins k >= 1 or absent everywhere.
    """
    meta = read_metadata(metadata_path)
    bin_times = np.asarray(meta["bin_times"], dtype=float)
    assets = list(meta["assets"])
    M1, d = bin_times.shape[0], len(assets)
    if len(set(assets)) != d:
        raise PanelError("duplicate asset names in metadata")
    col = {name: i for i, name in enumerate(assets)}
    n_days = meta.get("n_days")
    if n_days is not None and (not isinstance(n_days, int) or isinstance(n_days, bool) or n_days < 1):
        raise PanelError(f"metadata n_days must be a positive integer, got {n_days!r}")

    blocks: dict[int, np.ndarray] = {}
    vol_blocks: dict[int, np.ndarray] = {}
    seen: dict[int, np.ndarray] = {}
    vol_state = None  # True: volumes present, False: absent
    dense = (np.empty((n_days, M1, d)), np.zeros((n_days, M1, d))) if n_days is not None else None
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingInputError(f"panel file not found: {csv_path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise PanelError(f"header must be {','.join(HEADER)}, got {header}", line=1)
        for line, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise PanelError(f"expected 5 fields, got {len(row)}", line=line)
            try:
                day, k = int(row[0]), int(row[1])
                price = float(row[3])
            except ValueError as exc:
                raise PanelError(f"non-numeric field: {exc}", line=line) from None
            if day < 0 or (n_days is not None and day >= n_days):
                raise PanelError(f"day {day} out of range", line=line)
            if not 0 <= k < M1:
                raise PanelError(f"bin {k} out of range 0..{M1 - 1}", line=line)
            if row[2] not in col:
                raise PanelError(f"unknown asset {row[2]!r}", line=line)
            i = col[row[2]]
            if not np.isfinite(price):
                raise PanelError("price is not finite", line=line)
            if day not in blocks:
                if dense is not None:
                    # n_days is known: day blocks are views into the final arrays
                    blocks[day], vol_blocks[day] = dense[0][day], dense[1][day]
                else:
                    blocks[day], vol_blocks[day] = np.empty((M1, d)), np.zeros((M1, d))
                seen[day] = np.zeros((M1, d), dtype=bool)
            if seen[day][k, i]:
                raise PanelError(f"duplicate row for day {day}, bin {k}, asset {row[2]}", line=line)
            seen[day][k, i] = True
            blocks[day][k, i] = price
            if k > 0:
                has = row[4].strip() != ""
                if vol_state is None:
                    vol_state = has
                elif has != vol_state:
                    raise PanelError("net_volume is present on some rows and missing on others", line=line)
                if has:
                    try:
                        v = float(row[4])
                    except ValueError:
                        raise PanelError(f"non-numeric net_volume {row[4]!r}", line=line) from None
                    if not np.isfinite(v):
                        raise PanelError("net_volume is not finite", line=line)
                    vol_blocks[day][k, i] = v
            elif row[4].strip() not in ("", "0", "0.0"):
                raise PanelError("bin 0 holds the opening price only; net_volume must be empty", line=line)

    if not blocks:
        raise PanelError("panel has no rows")
    days = sorted(blocks)
    expected = n_days if n_days is not None else days[-1] + 1
    if days != list(range(expected)):
        missing = sorted(set(range(expected)) - set(days))
        raise PanelError(f"missing days: {missing[:10]}")
    for day in days:
        if not seen[day].all():
            k, i = np.argwhere(~seen[day])[0]
            raise PanelError(f"missing cell: day {day}, bin {k}, asset {assets[i]}")
    if dense is not None:
        prices, vols = dense
    else:
        prices = np.stack([blocks[day] for day in days])
        vols = np.stack([vol_blocks[day] for day in days])
    flows = vols[:, 1:] if vol_state else None
    units = meta.get("units") or {}
    return MarketPanel(prices=prices, bin_times=bin_times, net_flows=flows, assets=assets, units=units)
