"""Scenario configuration: what the facility runs and for how long.

A scenario is a JSON document. Every problem found during validation is
collected and reported together, with the offending field named, so a
config with three typos produces three diagnostics instead of three
edit-rerun round trips.

Schema (all times in seconds)::

    {
      "chambers": {
        "A": {"t_sp": 25.0, "rh_sp": 60.0,
              "geometry": {"volume_m3": 9.57},        # optional overrides
              "initial": {"t_c": 24.0, "rh_pct": 50.0}},  # optional start state
        ...
      },
      "duration_s": 86400,
      "time_scale": 1000,
      "faults": [{"target": "D.heater1", "at_time": 7200, "clear_at": null}],
      "seed": 1,
      "poll_interval_s": 5,
      "output_dir": "out"
    }

Fault targets are "<chamber>.<unit>" where the unit is one of the plant
fault targets (heater1, heater2, cool1, cool2, steam1, steam2, blower,
sensor1..sensor7).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .plant import AIR_DENSITY, FAULT_TARGETS, ChamberGeometry

CHAMBER_IDS = ("A", "B", "C", "D")

SETPOINT_T_RANGE = (5.0, 60.0)
SETPOINT_RH_RANGE = (10.0, 95.0)

_GEOMETRY_FIELDS = {f.name for f in dataclasses.fields(ChamberGeometry)}


class ConfigError(Exception):
    """One or more invalid fields; ``problems`` lists them all."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class FaultSpec:
    target: str  # "<chamber>.<unit>"
    at_time_s: float
    clear_at_s: float | None = None

    @property
    def chamber(self) -> str:
        return self.target.split(".", 1)[0]

    @property
    def unit(self) -> str:
        return self.target.split(".", 1)[1]


@dataclass(frozen=True)
class ChamberSetup:
    t_sp: float
    rh_sp: float
    geometry: ChamberGeometry = field(default_factory=ChamberGeometry)
    initial_t_c: float | None = None
    initial_rh_pct: float | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    chambers: dict[str, ChamberSetup]
    duration_s: float = 86400.0
    time_scale: float = 1000.0
    faults: tuple[FaultSpec, ...] = ()
    seed: int = 1
    poll_interval_s: float = 5.0
    output_dir: str = "out"

    def __post_init__(self) -> None:
        problems = _validate(self)
        if problems:
            raise ConfigError(problems)

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        time_scale: float | None = None,
        output_dir: str | None = None,
    ) -> "ScenarioConfig":
        updates: dict[str, object] = {}
        if seed is not None:
            updates["seed"] = seed
        if time_scale is not None:
            updates["time_scale"] = time_scale
        if output_dir is not None:
            updates["output_dir"] = output_dir
        return replace(self, **updates) if updates else self


def _validate(cfg: ScenarioConfig) -> list[str]:
    problems: list[str] = []
    if not cfg.chambers:
        problems.append("chambers: at least one chamber is required")
    for cid, setup in cfg.chambers.items():
        if cid not in CHAMBER_IDS:
            problems.append(f"chambers.{cid}: unknown chamber id (use A..D)")
            continue
        lo, hi = SETPOINT_T_RANGE
        if not lo <= setup.t_sp <= hi:
            problems.append(f"chambers.{cid}.t_sp: {setup.t_sp} outside [{lo}, {hi}]")
        lo, hi = SETPOINT_RH_RANGE
        if not lo <= setup.rh_sp <= hi:
            problems.append(f"chambers.{cid}.rh_sp: {setup.rh_sp} outside [{lo}, {hi}]")
    if cfg.duration_s <= 0:
        problems.append(f"duration_s: must be > 0, got {cfg.duration_s}")
    if cfg.time_scale < 1:
        problems.append(f"time_scale: must be >= 1, got {cfg.time_scale}")
    if cfg.poll_interval_s <= 0:
        problems.append(f"poll_interval_s: must be > 0, got {cfg.poll_interval_s}")
    if not isinstance(cfg.seed, int):
        problems.append(f"seed: must be an integer, got {cfg.seed!r}")
    for i, fs in enumerate(cfg.faults):
        where = f"faults[{i}]"
        if "." not in fs.target:
            problems.append(f"{where}.target: expected '<chamber>.<unit>', got {fs.target!r}")
            continue
        if fs.chamber not in cfg.chambers:
            problems.append(f"{where}.target: chamber {fs.chamber!r} not in this scenario")
        if fs.unit not in FAULT_TARGETS:
            problems.append(f"{where}.target: unknown unit {fs.unit!r}")
        if fs.at_time_s < 0:
            problems.append(f"{where}.at_time: must be >= 0, got {fs.at_time_s}")
        if fs.clear_at_s is not None and fs.clear_at_s <= fs.at_time_s:
            problems.append(f"{where}.clear_at: must be after at_time")
    return problems


def default_scenario() -> ScenarioConfig:
    """Four chambers at the standard stability conditions, 24 h at 1000x."""
    return ScenarioConfig(
        chambers={
            "A": ChamberSetup(t_sp=25.0, rh_sp=60.0),
            "B": ChamberSetup(t_sp=30.0, rh_sp=65.0),
            "C": ChamberSetup(t_sp=30.0, rh_sp=75.0),
            "D": ChamberSetup(t_sp=40.0, rh_sp=75.0),
        },
    )


def _expect_mapping(value: object, where: str, problems: list[str]) -> dict:
    if not isinstance(value, dict):
        problems.append(f"{where}: expected an object, got {type(value).__name__}")
        return {}
    return value


def _number(value: object, where: str, problems: list[str], default: float = 0.0) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{where}: expected a number, got {value!r}")
        return default
    return float(value)


def _check_keys(data: dict, allowed: set[str], where: str, problems: list[str]) -> None:
    for key in data:
        if key not in allowed:
            hint = ""
            close = [k for k in allowed if k.startswith(str(key)[:3])]
            if close:
                hint = f" (did you mean {close[0]!r}?)"
            problems.append(f"{where}.{key}: unknown field{hint}")


def _parse_chamber(cid: str, raw: object, problems: list[str]) -> ChamberSetup:
    where = f"chambers.{cid}"
    data = _expect_mapping(raw, where, problems)
    _check_keys(data, {"t_sp", "rh_sp", "geometry", "initial"}, where, problems)
    t_sp = _number(data.get("t_sp"), f"{where}.t_sp", problems, default=25.0)
    rh_sp = _number(data.get("rh_sp"), f"{where}.rh_sp", problems, default=60.0)
    geom = ChamberGeometry()
    overrides = _expect_mapping(data.get("geometry", {}), f"{where}.geometry", problems)
    clean: dict[str, float] = {}
    for key, value in overrides.items():
        if key not in _GEOMETRY_FIELDS:
            problems.append(f"{where}.geometry.{key}: unknown geometry field")
            continue
        clean[key] = _number(value, f"{where}.geometry.{key}", problems)
    if "volume_m3" in clean and "air_mass_kg" not in clean:
        # resizing the box implies the air charge unless stated otherwise
        clean["air_mass_kg"] = clean["volume_m3"] * AIR_DENSITY
    if clean:
        try:
            geom = replace(geom, **clean)
        except ValueError as exc:
            problems.append(f"{where}.geometry: {exc}")
    initial = _expect_mapping(data.get("initial", {}), f"{where}.initial", problems)
    _check_keys(initial, {"t_c", "rh_pct"}, f"{where}.initial", problems)
    init_t = initial.get("t_c")
    init_rh = initial.get("rh_pct")
    return ChamberSetup(
        t_sp=t_sp,
        rh_sp=rh_sp,
        geometry=geom,
        initial_t_c=None if init_t is None else _number(init_t, f"{where}.initial.t_c", problems),
        initial_rh_pct=None
        if init_rh is None
        else _number(init_rh, f"{where}.initial.rh_pct", problems),
    )


def _parse_fault(i: int, raw: object, problems: list[str]) -> FaultSpec:
    where = f"faults[{i}]"
    data = _expect_mapping(raw, where, problems)
    _check_keys(data, {"target", "at_time", "clear_at"}, where, problems)
    target = data.get("target")
    if not isinstance(target, str):
        problems.append(f"{where}.target: expected a string, got {target!r}")
        target = "?.?"
    at_time = _number(data.get("at_time", 0.0), f"{where}.at_time", problems)
    clear_at = data.get("clear_at")
    return FaultSpec(
        target=target,
        at_time_s=at_time,
        clear_at_s=None if clear_at is None else _number(clear_at, f"{where}.clear_at", problems),
    )


_TOP_KEYS = {
    "chambers",
    "duration_s",
    "time_scale",
    "faults",
    "seed",
    "poll_interval_s",
    "output_dir",
}


def parse_config(data: object) -> ScenarioConfig:
    """Build a ScenarioConfig from decoded JSON, reporting every problem."""
    problems: list[str] = []
    top = _expect_mapping(data, "config", problems)
    _check_keys(top, _TOP_KEYS, "config", problems)

    chambers: dict[str, ChamberSetup] = {}
    raw_chambers = _expect_mapping(top.get("chambers", {}), "chambers", problems)
    for cid, raw in raw_chambers.items():
        chambers[str(cid)] = _parse_chamber(str(cid), raw, problems)

    raw_faults = top.get("faults", [])
    if not isinstance(raw_faults, list):
        problems.append(f"faults: expected a list, got {type(raw_faults).__name__}")
        raw_faults = []
    faults = tuple(_parse_fault(i, raw, problems) for i, raw in enumerate(raw_faults))

    seed = top.get("seed", 1)
    if isinstance(seed, bool) or not isinstance(seed, int):
        problems.append(f"seed: expected an integer, got {seed!r}")
        seed = 1

    output_dir = top.get("output_dir", "out")
    if not isinstance(output_dir, str):
        problems.append(f"output_dir: expected a string, got {output_dir!r}")
        output_dir = "out"

    duration_s = _number(top.get("duration_s", 86400.0), "duration_s", problems, default=1.0)
    time_scale = _number(top.get("time_scale", 1000.0), "time_scale", problems, default=1.0)
    poll_interval_s = _number(
        top.get("poll_interval_s", 5.0), "poll_interval_s", problems, default=5.0
    )

    # range validation runs even when parsing already complained (bad fields
    # were substituted with safe defaults above), so one failed load reports
    # both kinds of problem together
    try:
        cfg = ScenarioConfig(
            chambers=chambers,
            duration_s=duration_s,
            time_scale=time_scale,
            faults=faults,
            seed=seed,
            poll_interval_s=poll_interval_s,
            output_dir=output_dir,
        )
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a scenario file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    return parse_config(data)
