"""Flat YAML run configs and sweep specs with unit-suffixed keys."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .dynamics import IDMParams
from .routing import EstimatorParams
from .simulation import DemandSpec, SimConfig

class ConfigError(ValueError):
    """Bad config; the message starts with the offending field name."""

    def __init__(self, field_name: str, problem: str):
        super().__init__(f"{field_name}: {problem}")
        self.field = field_name


def _number(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, f"expected a number, got {value!r}")
    return float(value)


def _integer(name, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    return value


def _boolean(name, value):
    if not isinstance(value, bool):
        raise ConfigError(name, f"expected true or false, got {value!r}")
    return value


def _text(name, value):
    if not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


# key -> (group, attribute, parser)
_FIELDS: dict[str, tuple[str, str, Callable]] = {
    "variant": ("sim", "variant", _text),
    "edge_length_m": ("sim", "edge_length", _number),
    "base_speed_limit_mps": ("sim", "base_speed_limit", _number),
    "added_path_speed_limit_mps": ("sim", "added_path_speed_limit", _number),
    "dt_s": ("sim", "dt", _number),
    "horizon_s": ("sim", "horizon", _number),
    "warmup_s": ("sim", "warmup", _number),
    "service_time_s": ("sim", "service_time", _number),
    "reroute_enabled": ("sim", "reroute_enabled", _boolean),
    "connector_length_m": ("sim", "connector_length", _number),
    "through_speed_cap": ("sim", "through_speed_cap", _boolean),
    "arrival_process": ("demand", "process", _text),
    "seed": ("demand", "seed", _integer),
    "idm_s0_m": ("idm", "s0", _number),
    "idm_time_headway_s": ("idm", "T", _number),
    "idm_max_accel_mps2": ("idm", "a_max", _number),
    "idm_comfort_decel_mps2": ("idm", "b_comf", _number),
    "idm_delta": ("idm", "delta", _number),
    "idm_vehicle_length_m": ("idm", "vehicle_length", _number),
    "est_accel_mps2": ("est", "a_const", _number),
    "est_end_speed_mps": ("est", "v_end", _number),
    "est_small_accel_threshold_mps2": ("est", "small_accel_threshold", _number),
    "est_min_speed_mps": ("est", "min_speed", _number),
}
_DEMAND_KEYS = ("demand_veh_per_hr", "inflow_nodes")
RUN_KEYS = frozenset(_FIELDS) | frozenset(_DEMAND_KEYS)


def _demand_rates(data: Mapping) -> dict[str, float]:
    raw = data.get("demand_veh_per_hr", 400.0)
    if isinstance(raw, Mapping):
        if "inflow_nodes" in data:
            raise ConfigError("inflow_nodes", "give either per-node demands or inflow_nodes, not both")
        rates = {str(k): _number(f"demand_veh_per_hr.{k}", v) for k, v in raw.items()}
    else:
        rate = _number("demand_veh_per_hr", raw)
        nodes = data.get("inflow_nodes", ["A"])
        if not isinstance(nodes, (list, tuple)) or not nodes:
            raise ConfigError("inflow_nodes", "expected a non-empty list of node ids")
        rates = {_text("inflow_nodes", n): rate for n in nodes}
    if not rates:
        raise ConfigError("demand_veh_per_hr", "no inflow nodes")
    return rates


def config_from_dict(data: Mapping[str, Any]) -> SimConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "expected a mapping of fields")
    unknown = sorted(set(data) - RUN_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    groups: dict[str, dict] = {"sim": {}, "demand": {}, "idm": {}, "est": {}}
    for key, value in data.items():
        if key in _FIELDS:
            group, attr, parse = _FIELDS[key]
            groups[group][attr] = parse(key, value)
    owner = {(g, a): k for k, (g, a, _) in _FIELDS.items()}

    def build(group, cls, **extra):
        try:
            return cls(**groups[group], **extra)
        except (ValueError, TypeError) as exc:
            # name the first field of this group the user set, or the group itself
            names = [owner[(group, a)] for a in groups[group]] or [group]
            hit = next((n for n in names if _FIELDS.get(n, ("", "", None))[1] in str(exc)), names[0])
            raise ConfigError(hit, str(exc)) from None

    demand = build("demand", DemandSpec, rates=_demand_rates(data))
    idm = build("idm", IDMParams)
    est = build("est", EstimatorParams)
    return build("sim", SimConfig, demand=demand, idm=idm, estimator=est)


def config_to_dict(cfg: SimConfig) -> dict[str, Any]:
    """Inverse of :func:`config_from_dict`; every field is written explicitly."""
    objs = {"sim": cfg, "demand": cfg.demand, "idm": cfg.idm, "est": cfg.estimator}
    out: dict[str, Any] = {}
    for key, (group, attr, _) in _FIELDS.items():
        out[key] = getattr(objs[group], attr)
    out["demand_veh_per_hr"] = {k: float(v) for k, v in sorted(cfg.demand.rates.items())}
    return out


def load_config(path: str | Path) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<syntax>", str(exc)) from None
    return config_from_dict(data if data is not None else {})


def dump_config(cfg: SimConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: SimConfig) -> str:
    """sha256 over the canonical JSON of every config field."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class SweepSpec:
    variants: tuple[str, ...] = ("baseline", "added_path")
    demands: tuple[float, ...] = (50.0, 200.0, 400.0, 600.0, 800.0, 900.0)
    edge_lengths: tuple[float, ...] = (50.0, 200.0, 300.0, 400.0)
    base_speed_limits: tuple[float, ...] = (35.0, 15.0, 10.0)
    added_path_speed_limit: float = 35.0
    inflow_sets: tuple[tuple[str, ...], ...] = (("A",),)
    seeds: tuple[int, ...] = (0,)
    base: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("variants", "demands", "edge_lengths", "base_speed_limits", "inflow_sets", "seeds"):
            if not getattr(self, name):
                raise ConfigError(name, "must not be empty")
        bad = sorted(set(self.base) - RUN_KEYS)
        if bad:
            raise ConfigError(f"base.{bad[0]}", "unknown field")
        for k in ("variant", "edge_length_m", "base_speed_limit_mps", "demand_veh_per_hr", "inflow_nodes", "seed"):
            if k in self.base:
                raise ConfigError(f"base.{k}", "is set by the sweep axes")

    @property
    def size(self) -> int:
        return (
            len(self.variants) * len(self.demands) * len(self.edge_lengths)
            * len(self.base_speed_limits) * len(self.inflow_sets) * len(self.seeds)
        )

    def cells(self) -> list[dict[str, Any]]:
        """One flat run config per cell of the cartesian product, in a fixed order."""
        out = []
        for inflow, limit, length, variant, demand, seed in itertools.product(
            self.inflow_sets, self.base_speed_limits, self.edge_lengths, self.variants, self.demands, self.seeds
        ):
            cell = dict(self.base)
            cell.update(
                variant=variant,
                edge_length_m=length,
                base_speed_limit_mps=limit,
                added_path_speed_limit_mps=self.added_path_speed_limit,
                demand_veh_per_hr=demand,
                inflow_nodes=list(inflow),
                seed=seed,
            )
            out.append(cell)
        return out


_SWEEP_KEYS = {
    "variants": "variants",
    "demands_veh_per_hr": "demands",
    "edge_lengths_m": "edge_lengths",
    "base_speed_limits_mps": "base_speed_limits",
    "added_path_speed_limit_mps": "added_path_speed_limit",
    "inflow_sets": "inflow_sets",
    "seeds": "seeds",
    "base": "base",
}


def sweep_from_dict(data: Mapping[str, Any]) -> SweepSpec:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "expected a mapping of fields")
    unknown = sorted(set(data) - set(_SWEEP_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    kw: dict[str, Any] = {}
    for key, attr in _SWEEP_KEYS.items():
        if key not in data:
            continue
        value = data[key]
        if key == "base":
            if not isinstance(value, Mapping):
                raise ConfigError(key, "expected a mapping")
            kw[attr] = dict(value)
        elif key == "added_path_speed_limit_mps":
            kw[attr] = _number(key, value)
        else:
            if not isinstance(value, list):
                raise ConfigError(key, "expected a list")
            if key == "inflow_sets":
                kw[attr] = tuple(tuple(_text(key, n) for n in s) if isinstance(s, list) else (_text(key, s),) for s in value)
            elif key == "seeds":
                kw[attr] = tuple(_integer(key, s) for s in value)
            elif key == "variants":
                kw[attr] = tuple(_text(key, s) for s in value)
            else:
                kw[attr] = tuple(_number(key, s) for s in value)
    return SweepSpec(**kw)


def load_sweep(path: str | Path) -> SweepSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    except yaml.YAMLError as exc:
        raise ConfigError("<syntax>", str(exc)) from None
    return sweep_from_dict(data if data is not None else {})
