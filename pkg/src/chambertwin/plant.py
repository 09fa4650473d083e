"""Lumped-parameter model of one stability chamber.

Two dynamic states, bulk temperature and humidity ratio, integrated with
fixed-step RK4. Actuators: two 4.2 kW electric heaters, two 8790 W (2.5 TR)
chilled-water cooling coils, two 7.2 kg/h steam generators driven by a
0-25 A analog signal, and a 2375 m3/h blower at 125 Pa static. Exactly one
unit per actuator pair is active; the spare takes over on failover. With
the blower off or faulted the air path is dead and no actuator has
convective authority.

Moisture bookkeeping (steam in, condensate out, door exchange) is summed
with the same RK4 stage weights as the humidity state, so the mass balance
closes to rounding error over any horizon.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

from . import psychro
from .noise import keyed_gauss

C_P_AIR = 1006.0  # J/(kg K)
C_P_STEAM = 1996.0  # J/(kg K), water vapor near the injection range
AIR_DENSITY = 1.2  # kg/m3
PA_PER_INWC = 249.089

# expanded polystyrene panels: k = 0.035 W/(m K), 75 mm walls,
# envelope area from the 1.47 x 3.4 x 2.74 m outer shell
PANEL_UA_WK = 0.035 / 0.075 * 2 * (1.47 * 3.4 + 1.47 * 2.74 + 3.4 * 2.74)

SENSOR_COUNT = 7

T_GUARD_MIN_C = -10.0
T_GUARD_MAX_C = 80.0
DT_MAX_S = 5.0

PRESSURE_HEALTHY_INWC = 125.0 / PA_PER_INWC  # 0.502 at rated static
PRESSURE_TAU_S = 2.0
PRESSURE_NOISE_INWC = 0.005
PRESSURE_CLAMP_INWC = 10.0  # transmitter range 0-10 inWC

FAULT_TARGETS = frozenset(
    ["heater1", "heater2", "cool1", "cool2", "steam1", "steam2", "blower"]
    + [f"sensor{i}" for i in range(1, SENSOR_COUNT + 1)]
)


class SimulationFault(RuntimeError):
    """State left the physically plausible envelope; the scenario must halt."""


@dataclass
class ChamberGeometry:
    volume_m3: float = 9.57
    air_mass_kg: float = 11.48
    extra_thermal_mass_jk: float = 50_000.0  # racks, shelves, product load
    ua_wk: float = PANEL_UA_WK
    ambient_t_c: float = 24.0
    ambient_rh_pct: float = 50.0
    door_exchange_per_min: float = 0.1  # air-mass fraction per minute while open
    sensor_t_sigma_c: float = 0.05
    sensor_rh_sigma_pct: float = 0.2
    sensor_t_offset_max_c: float = 0.7
    sensor_rh_offset_max_pct: float = 1.3

    def __post_init__(self) -> None:
        nominal = self.volume_m3 * AIR_DENSITY
        if abs(self.air_mass_kg - nominal) > 0.05 * nominal:
            raise ValueError(
                f"air_mass_kg {self.air_mass_kg} inconsistent with "
                f"volume {self.volume_m3} m3 (expected ~{nominal:.2f} kg)"
            )
        if self.ua_wk < 0 or self.extra_thermal_mass_jk < 0:
            raise ValueError("ua_wk and extra_thermal_mass_jk must be >= 0")

    @property
    def heat_capacity_jk(self) -> float:
        return self.air_mass_kg * C_P_AIR + self.extra_thermal_mass_jk


@dataclass
class ActuatorBank:
    heater_w: float = 4200.0
    cooling_w: float = 8790.0  # 2.5 TR
    steam_max_kg_h: float = 7.2
    steam_max_a: float = 25.0
    blower_power_w: float = 300.0
    blower_heat_fraction: float = 1.0  # motor sits in the airstream
    chilled_water_t_c: float = 7.5
    coil_approach_k: float = 3.0
    dehumid_rate_kg_s: float = 0.004  # condensation per unit duty per unit (w - w_sat)
    unit_active: dict[str, int] = field(
        default_factory=lambda: {"heater": 1, "cool": 1, "steam": 1}
    )

    def __post_init__(self) -> None:
        for actuator, unit in self.unit_active.items():
            if actuator not in ("heater", "cool", "steam") or unit not in (1, 2):
                raise ValueError(f"bad unit assignment {actuator}={unit}")

    @property
    def coil_surface_t_c(self) -> float:
        return self.chilled_water_t_c + self.coil_approach_k


@dataclass(frozen=True, slots=True)
class PlantInputs:
    heater_duty: float = 0.0
    cool_duty: float = 0.0
    steam_current_a: float = 0.0
    blower_on: bool = True
    door_open: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.heater_duty <= 1.0 and 0.0 <= self.cool_duty <= 1.0):
            raise ValueError("duties must lie in [0, 1]")
        if self.steam_current_a < 0.0:
            raise ValueError("steam current must be >= 0")


@dataclass(frozen=True, slots=True)
class PlantState:
    t_c: float
    w: float
    duct_pressure_inwc: float
    condensate_total_kg: float
    steam_total_kg: float
    door_moisture_total_kg: float
    sim_time_s: float
    faults: frozenset[str]
    sensor_offsets: tuple[tuple[float, float], ...]  # (t_c, rh_pct) per sensor
    rng_seed: int


def initial_state(geom: ChamberGeometry, rng_seed: int) -> PlantState:
    """Chamber soaked at ambient, blower off, offsets drawn once from the seed."""
    rng = random.Random(rng_seed)
    offsets = tuple(
        (
            rng.uniform(-geom.sensor_t_offset_max_c, geom.sensor_t_offset_max_c),
            rng.uniform(-geom.sensor_rh_offset_max_pct, geom.sensor_rh_offset_max_pct),
        )
        for _ in range(SENSOR_COUNT)
    )
    return PlantState(
        t_c=geom.ambient_t_c,
        w=psychro.humidity_ratio(geom.ambient_t_c, geom.ambient_rh_pct),
        duct_pressure_inwc=0.0,
        condensate_total_kg=0.0,
        steam_total_kg=0.0,
        door_moisture_total_kg=0.0,
        sim_time_s=0.0,
        faults=frozenset(),
        sensor_offsets=offsets,
        rng_seed=rng_seed,
    )


def inject_fault(state: PlantState, target: str, at_time_s: float | None = None) -> PlantState:
    """Mark a unit, the blower, or a sensor as failed from now on."""
    if target not in FAULT_TARGETS:
        raise ValueError(f"unknown fault target {target!r}")
    del at_time_s  # recorded by the caller's schedule; the flag applies now
    return replace(state, faults=state.faults | {target})


def clear_fault(state: PlantState, target: str) -> PlantState:
    return replace(state, faults=state.faults - {target})


def step(
    state: PlantState,
    geom: ChamberGeometry,
    bank: ActuatorBank,
    inputs: PlantInputs,
    dt: float = 1.0,
) -> PlantState:
    """Advance one RK4 step. Raises SimulationFault outside the guard band."""
    if not (0.0 < dt <= DT_MAX_S):
        raise ValueError(f"dt must be in (0, {DT_MAX_S}] s, got {dt}")

    faults = state.faults
    blower_ok = inputs.blower_on and "blower" not in faults
    heater_p = 0.0
    cooling_cap = 0.0
    steam_rate = 0.0
    blower_heat = 0.0
    if blower_ok:
        if f"heater{bank.unit_active['heater']}" not in faults:
            heater_p = bank.heater_w * inputs.heater_duty
        if f"cool{bank.unit_active['cool']}" not in faults:
            cooling_cap = bank.cooling_w * inputs.cool_duty
        if f"steam{bank.unit_active['steam']}" not in faults:
            current = min(inputs.steam_current_a, bank.steam_max_a)
            steam_rate = bank.steam_max_kg_h / 3600.0 * (current / bank.steam_max_a)
        blower_heat = bank.blower_power_w * bank.blower_heat_fraction

    cool_duty_eff = inputs.cool_duty if cooling_cap > 0.0 else 0.0
    w_sat_coil = psychro.saturation_humidity_ratio(bank.coil_surface_t_c)
    w_amb = psychro.humidity_ratio(geom.ambient_t_c, geom.ambient_rh_pct)
    exchange = (
        geom.door_exchange_per_min / 60.0 * geom.air_mass_kg if inputs.door_open else 0.0
    )
    c_total = geom.heat_capacity_jk
    m_air = geom.air_mass_kg

    def rates(t: float, w: float) -> tuple[float, float, float, float]:
        cond = bank.dehumid_rate_kg_s * cool_duty_eff * max(0.0, w - w_sat_coil)
        door_w = exchange * (w - w_amb)
        q = (
            heater_p
            - cooling_cap
            - geom.ua_wk * (t - geom.ambient_t_c)
            + steam_rate * C_P_STEAM * (100.0 - t)
            + blower_heat
            - exchange * C_P_AIR * (t - geom.ambient_t_c)
        )
        return q / c_total, steam_rate, cond, door_w

    t0, w0 = state.t_c, state.w
    k1 = rates(t0, w0)
    k2 = rates(t0 + 0.5 * dt * k1[0], w0 + 0.5 * dt * (k1[1] - k1[2] - k1[3]) / m_air)
    k3 = rates(t0 + 0.5 * dt * k2[0], w0 + 0.5 * dt * (k2[1] - k2[2] - k2[3]) / m_air)
    k4 = rates(t0 + dt * k3[0], w0 + dt * (k3[1] - k3[2] - k3[3]) / m_air)

    sixth = dt / 6.0
    d_temp = sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    d_steam = sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    d_cond = sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    d_door = sixth * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
    # derive the state change from the same sums so the balance closes exactly
    d_w = (d_steam - d_cond - d_door) / m_air

    t_new = t0 + d_temp
    w_new = max(0.0, w0 + d_w)
    if not (math.isfinite(t_new) and math.isfinite(w_new)):
        raise SimulationFault(f"non-finite state at t={state.sim_time_s + dt:.0f} s")
    if not (T_GUARD_MIN_C <= t_new <= T_GUARD_MAX_C):
        raise SimulationFault(
            f"temperature {t_new:.2f} C outside guard band "
            f"[{T_GUARD_MIN_C}, {T_GUARD_MAX_C}] at t={state.sim_time_s + dt:.0f} s"
        )

    p_target = PRESSURE_HEALTHY_INWC if blower_ok else 0.0
    decay = math.exp(-dt / PRESSURE_TAU_S)
    p_new = p_target + (state.duct_pressure_inwc - p_target) * decay

    return replace(
        state,
        t_c=t_new,
        w=w_new,
        duct_pressure_inwc=p_new,
        condensate_total_kg=state.condensate_total_kg + d_cond,
        steam_total_kg=state.steam_total_kg + d_steam,
        door_moisture_total_kg=state.door_moisture_total_kg + d_door,
        sim_time_s=state.sim_time_s + dt,
    )


@dataclass(frozen=True, slots=True)
class SensorReading:
    sensor_id: int
    t_c: float
    rh_pct: float
    ok: bool


class ChamberPlant:
    """Stateful wrapper: one chamber plus its sensor rack and fault latches."""

    def __init__(self, geom: ChamberGeometry, bank: ActuatorBank, rng_seed: int) -> None:
        self.geom = geom
        self.bank = bank
        self.state = initial_state(geom, rng_seed)
        self._stale: dict[int, SensorReading] = {}
        self._last_live: dict[int, SensorReading] = {}
        self._rh_cache: tuple[PlantState, float] | None = None

    def step(self, inputs: PlantInputs, dt: float = 1.0) -> PlantState:
        self.state = step(self.state, self.geom, self.bank, inputs, dt)
        return self.state

    def inject_fault(self, target: str) -> None:
        self.state = inject_fault(self.state, target)

    def clear_fault(self, target: str) -> None:
        self.state = clear_fault(self.state, target)

    def set_active_unit(self, actuator: str, unit: int) -> None:
        if actuator not in ("heater", "cool", "steam") or unit not in (1, 2):
            raise ValueError(f"bad unit assignment {actuator}={unit}")
        self.bank.unit_active[actuator] = unit

    def active_unit_faulted(self, actuator: str) -> bool:
        return f"{actuator}{self.bank.unit_active[actuator]}" in self.state.faults

    def sensor_read(self, sensor_id: int) -> SensorReading:
        """Offset plus keyed noise on the bulk state; faulted sensors go stale."""
        if not (1 <= sensor_id <= SENSOR_COUNT):
            raise ValueError(f"sensor_id must be 1..{SENSOR_COUNT}, got {sensor_id}")
        state = self.state
        if f"sensor{sensor_id}" in state.faults:
            stale = self._stale.get(sensor_id)
            if stale is None:
                # latch the last good reading (or the instantaneous value if
                # the sensor was never read) with the quality flag dropped
                base = self._last_live.get(sensor_id) or self._live_reading(sensor_id)
                stale = SensorReading(base.sensor_id, base.t_c, base.rh_pct, False)
                self._stale[sensor_id] = stale
            return stale
        reading = self._live_reading(sensor_id)
        self._last_live[sensor_id] = reading
        self._stale.pop(sensor_id, None)
        return reading

    def _live_reading(self, sensor_id: int) -> SensorReading:
        state = self.state
        off_t, off_rh = state.sensor_offsets[sensor_id - 1]
        tick = int(round(state.sim_time_s * 1000.0))
        # noise channels: sensor_id*10 for temperature, +1 for humidity
        t = state.t_c + off_t + self.geom.sensor_t_sigma_c * keyed_gauss(
            state.rng_seed, sensor_id * 10, tick
        )
        # bulk RH is the same for every sensor on this state; computing the
        # psychrometrics once per tick instead of once per probe matters at
        # accelerated time
        if self._rh_cache is None or self._rh_cache[0] is not state:
            self._rh_cache = (
                state, psychro.relative_humidity(psychro.MoistAir(state.t_c, state.w))
            )
        rh_bulk = self._rh_cache[1]
        rh = rh_bulk + off_rh + self.geom.sensor_rh_sigma_pct * keyed_gauss(
            state.rng_seed, sensor_id * 10 + 1, tick
        )
        return SensorReading(sensor_id, t, min(100.0, max(0.0, rh)), True)

    def readings(self) -> list[SensorReading]:
        return [self.sensor_read(i) for i in range(1, SENSOR_COUNT + 1)]

    def pressure_read(self) -> float:
        state = self.state
        tick = int(round(state.sim_time_s * 1000.0))
        value = state.duct_pressure_inwc + PRESSURE_NOISE_INWC * keyed_gauss(
            state.rng_seed, 9000, tick
        )
        return min(PRESSURE_CLAMP_INWC, max(0.0, value))
