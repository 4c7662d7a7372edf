"""Scenario files: JSON with the unit spelled out in every numeric field name.

A field whose stem is known but whose unit suffix differs (``sigma_usd_per_day``
instead of ``sigma_usd_per_sqrt_day_per_share``) is rejected with
UnitMismatchError rather than silently reinterpreted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import DEFAULT_BOUNDS
from .core.params import AgentClass, MarketParams, TimeGrid
from .errors import MissingInputError, SchemaError, UnitMismatchError
from .market_sim import InventoryLaw, SimConfig

# section -> {canonical field: required}
FIELDS = {
    "market": {
        "assets": False,
        "sigma_usd_per_sqrt_day_per_share": False,
        "correlation": False,
        "covariance_usd2_per_day_per_share2": False,
        "daily_volume_share_per_day": True,
        "eta_usd_per_share": True,
        "alpha_usd_per_share": True,
        "terminal_penalty_usd_per_day_per_share": True,
        "risk_aversion_per_usd": True,
        "horizon_day": False,
    },
    "grid": {"n_steps": True},
    "mean_field": {"E0_share": False, "classes": False, "damping": False, "max_iter": False, "tol": False},
    "agent": {"q0_share": True, "S0_usd_per_share": False},
    "simulation": {
        "n_days": True,
        "n_bins": True,
        "steps_per_bin": False,
        "inventory_covariance_share2": True,
        "inventory_mean_share": False,
        "extra_price_covariance_usd2_per_day_per_share2": False,
        "flow_noise_std_share": False,
        "S0_usd_per_share": False,
    },
    "analysis": {"lambdas": False, "bootstrap_draws": False},
    "calibration": {
        "terminal_penalty_usd_per_day_per_share": False,
        "fundamental_fraction": False,
        "shift_fraction": False,
        "k_bounds_share2_per_day_per_usd": False,
        "gamma_bounds_per_usd": False,
        "inventory_variance_bounds_share2": False,
        "n_restarts": False,
        "n_screen": False,
        "max_evals": False,
        "steps_per_bin": False,
    },
    "class": {
        "weight": True,
        "risk_aversion_per_usd": True,
        "terminal_penalty_usd_per_day_per_share": True,
        "E0_share": True,
    },
}
TOP_LEVEL = {"name", "seed", "output_dir", "market", "grid", "mean_field", "agent", "simulation", "analysis", "calibration"}

_STEMS = {}
for _section, _fields in FIELDS.items():
    for _name in _fields:
        for _stem in ("sigma", "covariance", "daily_volume", "eta", "alpha", "terminal_penalty", "risk_aversion",
                      "horizon", "E0", "q0", "S0", "inventory_covariance", "inventory_mean",
                      "extra_price_covariance", "flow_noise_std", "k_bounds", "gamma_bounds",
                      "inventory_variance_bounds"):
            if _name.startswith(_stem + "_"):
                _STEMS.setdefault(_section, {})[_stem] = _name


def _check_section(name, data, section_key=None):
    spec = FIELDS[section_key or name]
    if not isinstance(data, dict):
        raise SchemaError(f"section '{name}' must be an object")
    for key in data:
        if key in spec:
            continue
        for stem, canonical in _STEMS.get(section_key or name, {}).items():
            if key == stem or key.startswith(stem + "_"):
                raise UnitMismatchError(f"field '{name}.{key}' has the wrong unit; expected '{canonical}'")
        raise SchemaError(f"unknown field '{name}.{key}'")
    for key, required in spec.items():
        if required and key not in data:
            raise SchemaError(f"missing field '{name}.{key}'")


def _array(data, key, where):
    try:
        return np.asarray(data[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"'{where}.{key}' is not numeric: {exc}") from None


def _vec(data, key, d, where):
    arr = _array(data, key, where)
    if arr.shape != (d,):
        raise SchemaError(f"'{where}.{key}' must have {d} entries")
    return arr


def _mat(data, key, d, where):
    arr = _array(data, key, where)
    if arr.shape != (d, d):
        raise SchemaError(f"'{where}.{key}' must be a {d}x{d} matrix")
    return arr


@dataclass
class Scenario:
    raw: dict
    params: MarketParams
    grid: TimeGrid
    assets: list
    seed: int = 0
    E0: np.ndarray | None = None
    classes: list = field(default_factory=list)
    fixed_point: dict = field(default_factory=dict)
    q0: np.ndarray | None = None
    S0: float = 100.0
    sim: SimConfig | None = None
    lambdas: list = field(default_factory=list)
    bootstrap_draws: int = 0
    calibration: dict = field(default_factory=dict)
    output_dir: str | None = None

    @property
    def hash(self) -> str:
        return scenario_hash(self.raw)


def scenario_hash(raw: dict) -> str:
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_scenario(path, seed_override=None) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingInputError(f"scenario file not found: {path}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scenario is not valid JSON: {exc}") from exc
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    return parse_scenario(raw)


def parse_scenario(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise SchemaError("scenario must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise SchemaError(f"unknown top-level fields: {sorted(unknown)}")
    if "market" not in raw:
        raise SchemaError("missing section 'market'")
    _check_section("market", raw["market"])
    if "grid" not in raw:
        raise SchemaError("missing section 'grid'")
    seed = int(raw.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise SchemaError("seed must be an unsigned 64-bit integer")

    m = raw["market"]
    _check_section("market", m)
    d = len(m["daily_volume_share_per_day"])
    assets = list(m.get("assets") or [f"asset{i + 1}" for i in range(d)])
    if len(assets) != d:
        raise SchemaError("market.assets must list one name per asset")
    common = dict(
        V=_vec(m, "daily_volume_share_per_day", d, "market"),
        eta=_vec(m, "eta_usd_per_share", d, "market"),
        alpha=_vec(m, "alpha_usd_per_share", d, "market"),
        A_term=_vec(m, "terminal_penalty_usd_per_day_per_share", d, "market"),
        gamma=float(m["risk_aversion_per_usd"]),
        T=float(m.get("horizon_day", 1.0)),
    )
    if "covariance_usd2_per_day_per_share2" in m:
        if "sigma_usd_per_sqrt_day_per_share" in m or "correlation" in m:
            raise SchemaError("give either the covariance or sigma with correlation, not both")
        params = MarketParams.from_covariance(_mat(m, "covariance_usd2_per_day_per_share2", d, "market"), **common)
    else:
        if "sigma_usd_per_sqrt_day_per_share" not in m:
            raise SchemaError("market needs sigma_usd_per_sqrt_day_per_share or a covariance")
        corr = _mat(m, "correlation", d, "market") if "correlation" in m else np.eye(d)
        params = MarketParams(sigma=_vec(m, "sigma_usd_per_sqrt_day_per_share", d, "market"), corr=corr, **common)

    g = raw["grid"]
    _check_section("grid", g)
    grid = TimeGrid(int(g["n_steps"]), params.T)
    sc = Scenario(raw=raw, params=params, grid=grid, assets=assets, seed=seed, output_dir=raw.get("output_dir"))

    if "mean_field" in raw:
        mf = raw["mean_field"]
        _check_section("mean_field", mf)
        if "E0_share" in mf:
            sc.E0 = _vec(mf, "E0_share", d, "mean_field")
        for i, c in enumerate(mf.get("classes", [])):
            _check_section(f"mean_field.classes[{i}]", c, "class")
            sc.classes.append(AgentClass(
                weight=float(c["weight"]), gamma=float(c["risk_aversion_per_usd"]),
                A_term=_vec(c, "terminal_penalty_usd_per_day_per_share", d, "class"),
                E0=_vec(c, "E0_share", d, "class"),
            ))
        for key in ("damping", "max_iter", "tol"):
            if key in mf:
                sc.fixed_point[key] = mf[key]
        if sc.E0 is None and not sc.classes:
            raise SchemaError("mean_field needs E0_share or classes")
    if "agent" in raw:
        a = raw["agent"]
        _check_section("agent", a)
        sc.q0 = _vec(a, "q0_share", d, "agent")
        sc.S0 = float(a.get("S0_usd_per_share", 100.0))
    if "simulation" in raw:
        s = raw["simulation"]
        _check_section("simulation", s)
        law = InventoryLaw(
            Gamma=_mat(s, "inventory_covariance_share2", d, "simulation"),
            mean=_vec(s, "inventory_mean_share", d, "simulation") if "inventory_mean_share" in s else None,
        )
        extra = _mat(s, "extra_price_covariance_usd2_per_day_per_share2", d, "simulation") \
            if "extra_price_covariance_usd2_per_day_per_share2" in s else None
        noise = np.broadcast_to(np.asarray(s["flow_noise_std_share"], dtype=float), (d,)).copy() \
            if "flow_noise_std_share" in s else None
        sc.sim = SimConfig(
            params=params, law=law, n_days=int(s["n_days"]), n_bins=int(s["n_bins"]), seed=seed,
            steps_per_bin=int(s.get("steps_per_bin", 1)), S0=float(s.get("S0_usd_per_share", 100.0)),
            extra_price_cov=extra, flow_noise_std=noise,
        )
    if "analysis" in raw:
        an = raw["analysis"]
        _check_section("analysis", an)
        sc.lambdas = [None if v is None else float(v) for v in an.get("lambdas", [])]
        sc.bootstrap_draws = int(an.get("bootstrap_draws", 0))
    if "calibration" in raw:
        c = raw["calibration"]
        _check_section("calibration", c)
        bounds = dict(DEFAULT_BOUNDS)
        for key, name in (("k", "k_bounds_share2_per_day_per_usd"), ("gamma", "gamma_bounds_per_usd"),
                          ("Gamma", "inventory_variance_bounds_share2")):
            if name in c:
                lo, hi = c[name]
                bounds[key] = (float(lo), float(hi))
        sc.calibration = {
            "A_term": float(c.get("terminal_penalty_usd_per_day_per_share", 10.0)),
            "fundamental_fraction": float(c.get("fundamental_fraction", 0.2)),
            "shift_fraction": float(c.get("shift_fraction", 0.3)),
            "bounds": bounds,
            "n_restarts": int(c.get("n_restarts", 5)),
            "max_evals": int(c.get("max_evals", 4000)),
            "n_screen": int(c.get("n_screen", 256)),
            "steps_per_bin": int(c.get("steps_per_bin", 1)),
        }
    return sc


def require(scenario: Scenario, attr: str, section: str):
    value = getattr(scenario, attr)
    if value is None or (isinstance(value, (list, dict)) and not value):
        raise SchemaError(f"this command needs the '{section}' section")
    return value

