"""Command-line front end driven by scenario files.

    mfgtrade solve --scenario s.json --out results/
    mfgtrade simulate --scenario s.json --out results/ --threads 4
    mfgtrade estimate --scenario s.json --out results/ [--panel p.csv --metadata p.json]

Failures print one JSON record on stderr and exit with the error's code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import panel_io
from .calibration import CalibrationConfig, calibrate, prepare_inputs
from .core.meanfield import solve_mean_field_heterogeneous, solve_mean_field_identical
from .core.strategy import simulate_agent
from .covariance.estimators import (
    covariance_standard_errors,
    estimate_covariance,
    flow_covariance,
    median_patterns,
)
from .covariance.regression import bootstrap_alpha_sq, fit_impact_regression
from .covariance.theory import theoretical_excess
from .errors import MFGError, MissingInputError, SchemaError
from .market_sim import simulate_panel
from .scenario import Scenario, load_scenario, require

logger = logging.getLogger("mfgtrade")

PANEL_CSV = "panel.csv"
PANEL_META = "panel_meta.json"
MANIFEST = "manifest.json"


def _fmt(x) -> str:
    x = float(x)
    return "" if np.isnan(x) else repr(x)


class Output:
    """Writes files atomically into one directory and keeps a manifest of their hashes."""

    def __init__(self, folder: Path, scenario: Scenario, command: str):
        self.folder = folder
        self.scenario = scenario
        self.command = command
        folder.mkdir(parents=True, exist_ok=True)
        self.written = {}

    def text(self, name: str, text: str):
        panel_io.atomic_write_text(self.folder / name, text)
        self.written[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()

    def csv(self, name: str, header, rows):
        lines = [",".join(header)]
        lines += [",".join(r) for r in rows]
        self.text(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj):
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def close(self):
        path = self.folder / MANIFEST
        manifest = {"scenario_hash": self.scenario.hash, "files": {}}
        if path.exists():
            try:
                old = json.loads(path.read_text(encoding="utf-8"))
                if old.get("scenario_hash") == self.scenario.hash:
                    manifest["files"] = old.get("files", {})
            except json.JSONDecodeError:
                pass
        for name, digest in self.written.items():
            manifest["files"][name] = {"sha256": digest, "command": self.command}
        panel_io.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_panel(args, sc: Scenario, out: Output):
    csv_path = Path(args.panel) if args.panel else out.folder / PANEL_CSV
    meta_path = Path(args.metadata) if args.metadata else csv_path.with_name(PANEL_META)
    if not csv_path.exists():
        raise MissingInputError(f"no panel at {csv_path}; run 'simulate' first or pass --panel")
    return panel_io.ingest_panel(csv_path, meta_path)


def cmd_solve(args, sc: Scenario, out: Output):
    p, grid, assets = sc.params, sc.grid, sc.assets
    if sc.classes:
        kw = {k: sc.fixed_point[k] for k in ("damping", "max_iter", "tol") if k in sc.fixed_point}
        het = solve_mean_field_heterogeneous(p, sc.classes, grid, **kw)
        sols = het.classes
        summary = {"iterations": het.iterations, "residuals": [float(r) for r in het.residuals],
                   "damping": float(het.damping)}
    else:
        sols = [solve_mean_field_identical(p, require(sc, "E0", "mean_field"), grid)]
        summary = {}
    iu = np.triu_indices(p.d)
    summary["boundary_residual"] = []
    for a, s in enumerate(sols):
        header = ["t"] + [f"{q}_{n}" for q in ("E", "Edot", "mu", "Hs") for n in assets]
        header += [f"H_{assets[i]}_{assets[j]}" for i, j in zip(*iu)] + ["h"]
        rows = []
        for k, t in enumerate(grid.nodes):
            vals = [t, *s.E[k], *s.Edot[k], *s.mu[k], *s.Hs[k], *s.riccati.H[k][iu], s.h[k]]
            rows.append([_fmt(v) for v in vals])
        name = "curves.csv" if len(sols) == 1 and not sc.classes else f"curves_class{a}.csv"
        out.csv(name, header, rows)
        summary["boundary_residual"].append(s.boundary_residual())
    out.json("solve_summary.json", {"scenario_hash": sc.hash, **summary})


def cmd_agent(args, sc: Scenario, out: Output):
    sol = solve_mean_field_identical(sc.params, require(sc, "E0", "mean_field"), sc.grid)
    tr = simulate_agent(require(sc, "q0", "agent"), sol, sc.params, S0=sc.S0)
    names = sc.assets
    header = ["t"] + [f"q_{n}" for n in names] + [f"v_{n}" for n in names] + [f"price_{n}" for n in names] + ["cash"]
    rows = [[_fmt(v) for v in (t, *tr.q[k], *tr.v[k], *tr.prices[k], tr.cash[k])] for k, t in enumerate(tr.t)]
    out.csv("agent.csv", header, rows)
    out.json("agent_summary.json", {"scenario_hash": sc.hash, "reward_terminal": tr.reward_terminal,
                                    "final_inventory": [float(v) for v in tr.q[-1]]})


def cmd_simulate(args, sc: Scenario, out: Output):
    cfg = require(sc, "sim", "simulation")
    panel = simulate_panel(cfg, threads=args.threads)
    panel.assets = list(sc.assets)
    out.text(PANEL_CSV, panel_io.panel_csv_text(panel))
    out.json(PANEL_META, panel_io.panel_metadata(panel, sc.hash))


def _cov_rows(M, d, values):
    rows = []
    for k in range(M):
        for i in range(d):
            for j in range(i, d):
                rows.append([str(k + 1), str(i), str(j)] + [_fmt(v[k, i, j]) for v in values])
    return rows


def cmd_estimate(args, sc: Scenario, out: Output):
    panel = _load_panel(args, sc, out)
    series = estimate_covariance(panel)
    se = covariance_standard_errors(panel)
    M, d = series.n_bins, panel.d
    out.csv("covariance.csv", ["bin", "i", "j", "C", "R"], _cov_rows(M, d, [series.C, series.R]))
    out.csv("covariance_se.csv", ["bin", "i", "j", "se"], _cov_rows(M, d, [se]))
    if panel.net_flows is not None:
        out.csv("flow_covariance.csv", ["bin", "i", "j", "F"], _cov_rows(M, d, [flow_covariance(panel)]))


def cmd_predict(args, sc: Scenario, out: Output):
    cfg = require(sc, "sim", "simulation")
    pred = theoretical_excess(cfg.params, cfg.law, cfg.grid, cfg.n_bins, extra_price_cov=cfg.extra_price_cov)
    M, d = pred.total.shape[:2]
    out.csv("prediction.csv", ["bin", "i", "j", "fundamental", "excess", "total", "A", "B"],
            _cov_rows(M, d, [pred.fundamental, pred.excess, pred.total, pred.A, pred.B]))


def cmd_patterns(args, sc: Scenario, out: Output):
    panel = _load_panel(args, sc, out)
    lambdas = sc.lambdas or [None, 1.0]
    rows = []
    for pat in median_patterns(panel, lambdas):
        lam = "inf" if pat.lam is None else repr(pat.lam)
        for k in range(panel.n_bins):
            rows.append([str(k + 1), lam, _fmt(pat.C_diag[k]), _fmt(pat.C_off[k]),
                         _fmt(pat.counts_diag[k]), _fmt(pat.counts_off[k])])
    out.csv("patterns.csv", ["bin", "lambda", "diag", "off", "count_diag", "count_off"], rows)


def cmd_regress(args, sc: Scenario, out: Output):
    panel = _load_panel(args, sc, out)
    if panel.net_flows is None:
        raise MissingInputError("the regression needs net flows in the panel")
    C, F = estimate_covariance(panel).C, flow_covariance(panel)
    dt_bin = panel.bin_length()
    rows = []
    for i, name in enumerate(panel.assets):
        f = fit_impact_regression(C[:, i, i], F[:, i, i], dt_bin)
        rows.append([name] + [_fmt(v) for v in (f.alpha_sq, f.alpha_hat, f.sigma_hat, f.se_alpha_sq,
                                                 f.pvalue_alpha_sq, f.corr_cf)])
    out.csv("regression.csv", ["asset", "alpha_sq", "alpha_hat", "sigma_hat", "se", "pvalue", "corr_cf"], rows)
    if sc.bootstrap_draws:
        point, se, lo, hi = bootstrap_alpha_sq(panel, sc.bootstrap_draws, seed=sc.seed)
        rows = [[name] + [_fmt(v) for v in (point[i], se[i], lo[i], hi[i])] for i, name in enumerate(panel.assets)]
        out.csv("regression_bootstrap.csv", ["asset", "alpha_sq", "se", "lower", "upper"], rows)


def cmd_calibrate(args, sc: Scenario, out: Output):
    panel = _load_panel(args, sc, out)
    opts = dict(sc.calibration) if sc.calibration else {}
    config = CalibrationConfig(inputs=prepare_inputs(panel), seed=sc.seed, **opts)
    result = calibrate(config, threads=args.threads)
    report = result.to_dict()
    report["scenario_hash"] = sc.hash
    report["assets"] = list(panel.assets)
    out.json("calibration.json", report)


COMMANDS = {
    "solve": (cmd_solve, "mean-field curves E, mu, H, Hs"),
    "agent": (cmd_agent, "trajectory of one investor from q0"),
    "simulate": (cmd_simulate, "synthetic panel CSV"),
    "estimate": (cmd_estimate, "per-bin covariance and correlation"),
    "predict": (cmd_predict, "closed-form fundamental and excess covariance"),
    "patterns": (cmd_patterns, "median conditioned intraday patterns"),
    "regress": (cmd_regress, "market-impact regression per asset"),
    "calibrate": (cmd_calibrate, "fit k, gamma and Gamma_diag to the panel"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgtrade", description="Mean-field trading crowd: solvers, simulation, covariance analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", help="output directory (default: scenario output_dir or ./out)")
        p.add_argument("--seed", type=int, help="overrides the scenario seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("--panel", help="panel CSV (default: <out>/panel.csv)")
        p.add_argument("--metadata", help="panel metadata JSON (default: next to the panel)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error_record(exc: Exception) -> dict:
    if isinstance(exc, MFGError):
        rec = {"error": exc.kind, "code": exc.code, "message": str(exc)}
        line = getattr(exc, "line", None)
        if line is not None:
            rec["line"] = line
        history = getattr(exc, "history", None)
        if history:
            rec["residual_history"] = [float(h) for h in history]
        return rec
    return {"error": "internal_error", "code": 1, "message": f"{type(exc).__name__}: {exc}"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise SchemaError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise SchemaError("--seed must be an unsigned 64-bit integer")
        sc = load_scenario(args.scenario, args.seed)
        folder = Path(args.out or sc.output_dir or "out")
        out = Output(folder, sc, args.command)
        COMMANDS[args.command][0](args, sc, out)
        out.close()
    except Exception as exc:  # every failure becomes one machine-readable record
        rec = _error_record(exc)
        if rec["error"] == "internal_error":
            logger.debug("unexpected failure", exc_info=True)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return int(rec["code"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
