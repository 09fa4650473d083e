"""Split-range PID control for one chamber.

The temperature loop drives a heater SSR and a chilled-water valve through
a split-range map with a small deadband so the two never fight. SSR
channels are pulse-width modulated over a 10 s window; on-time is spread
across windows with a cumulative (Bresenham) rule so the long-run average
matches the commanded duty even though on-time is quantized to whole
simulation steps. The humidity loop drives the steam generator through the
4-20 mA / 0-25 A analog map, and is held off while temperature is more
than half a kelvin from its setpoint so a warm-up never fills the box with
moisture it cannot later shed.

PID is the positional form with derivative on measurement and conditional
integration: the integral freezes while the output is pinned at a limit
and the error keeps pushing outward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .plant import ChamberPlant, PlantInputs, SensorReading

SPLIT_DEADBAND = 0.02
PWM_PERIOD_S = 10.0
STEAM_HOLD_BAND_C = 0.5  # steam stays off until temperature is this close to setpoint


@dataclass(frozen=True)
class PidGains:
    kp: float
    ti_s: float = math.inf
    td_s: float = 0.0
    out_min: float = -1.0
    out_max: float = 1.0
    sample_time_s: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.kp):
            raise ValueError("kp must be finite")
        if self.ti_s <= 0 or self.td_s < 0:
            raise ValueError("ti_s must be > 0 and td_s >= 0")
        if not (self.out_min < self.out_max):
            raise ValueError("out_min must be below out_max")
        if self.sample_time_s <= 0:
            raise ValueError("sample_time_s must be > 0")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_pv: float = 0.0
    initialized: bool = False
    last_output: float = 0.0
    sensor_fault: bool = False


def pid_step(
    gains: PidGains, state: PidState, sp: float, pv: float, dt: float
) -> tuple[float, PidState]:
    """One controller update; returns (output, next state).

    dt must stay within half to twice the configured sample time; a non
    finite pv holds the previous output and flags a sensor fault.
    """
    if not (0.5 * gains.sample_time_s <= dt <= 2.0 * gains.sample_time_s):
        raise ValueError(
            f"dt {dt} outside [{0.5 * gains.sample_time_s}, {2.0 * gains.sample_time_s}]"
        )
    if not math.isfinite(pv):
        return state.last_output, replace(state, sensor_fault=True)

    error = sp - pv
    proportional = gains.kp * error
    derivative = 0.0
    if gains.td_s > 0.0 and state.initialized:
        derivative = -gains.kp * gains.td_s * (pv - state.prev_pv) / dt

    unclamped = proportional + state.integral + derivative
    delta_i = 0.0
    if math.isfinite(gains.ti_s):
        delta_i = gains.kp * dt / gains.ti_s * error
        pushing_out = (unclamped > gains.out_max and error > 0.0) or (
            unclamped < gains.out_min and error < 0.0
        )
        if pushing_out:
            delta_i = 0.0
    integral = state.integral + delta_i
    output = min(gains.out_max, max(gains.out_min, proportional + integral + derivative))
    return output, PidState(integral, pv, True, output, False)


def split_range(u: float, deadband: float = SPLIT_DEADBAND) -> tuple[float, float]:
    """Map a bipolar command to (heater_duty, cool_duty); both off inside the deadband."""
    if not (-1.0 <= u <= 1.0):
        raise ValueError(f"split-range input {u} outside [-1, 1]")
    if u > deadband:
        return u, 0.0
    if u < -deadband:
        return 0.0, -u
    return 0.0, 0.0


def pwm_modulate(duty: float, period_s: float, t_s: float, step_s: float = 1.0) -> bool:
    """SSR gate state at time t for the given duty.

    On-time per window is quantized to whole steps; the quantization error
    is carried between windows so the average over many windows equals the
    commanded duty to within one step per period.
    """
    if not (0.0 <= duty <= 1.0):
        raise ValueError(f"duty {duty} outside [0, 1]")
    if period_s <= 0 or not (0.0 < step_s <= period_s):
        raise ValueError("need period_s > 0 and 0 < step_s <= period_s")
    window = math.floor(t_s / period_s)
    position = t_s - window * period_s
    per_window = duty * period_s / step_s
    cum_before = math.floor(per_window * window + 0.5)
    cum_after = math.floor(per_window * (window + 1) + 0.5)
    on_time = (cum_after - cum_before) * step_s
    return position < on_time - 1e-9


def analog_out(u: float) -> tuple[float, float]:
    """(4-20 mA command, 0-25 A steam current) for a unipolar output."""
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"analog output command {u} outside [0, 1]")
    return 4.0 + 16.0 * u, 25.0 * u


def default_gains(loop_kind: str) -> PidGains:
    """Commissioning defaults, conservative enough for any supported setpoint."""
    if loop_kind == "temperature":
        # kp sized to land a cold-start ramp with about 0.2 K of overshoot.
        # That matters more than it looks: the humidity loop fills to the
        # temperature it sees, and moisture laid down against a hot transient
        # has no dryer to take it back out once the chamber relaxes.
        return PidGains(kp=0.4, ti_s=600.0, td_s=0.0, out_min=-1.0, out_max=1.0)
    if loop_kind == "humidity":
        # slow integral on purpose: the steady-state steam bias is nearly
        # zero (condensate on the cooling coil is the only moisture drain),
        # so the integral only has to trim a few tenths of a percent
        return PidGains(kp=0.1, ti_s=1500.0, td_s=0.0, out_min=0.0, out_max=1.0)
    raise ValueError(f"unknown loop kind {loop_kind!r}")


@dataclass
class LoopConfig:
    kind: str
    feedback: int | str = 1  # sensor id, or "mean" across healthy sensors
    deadband: float = SPLIT_DEADBAND
    pwm_period_s: float = PWM_PERIOD_S

    def __post_init__(self) -> None:
        if self.kind not in ("temperature", "humidity"):
            raise ValueError(f"unknown loop kind {self.kind!r}")
        if isinstance(self.feedback, str) and self.feedback != "mean":
            raise ValueError("feedback must be a sensor id or 'mean'")
        if isinstance(self.feedback, int) and not (1 <= self.feedback <= 7):
            raise ValueError("feedback sensor id must be 1..7")


@dataclass(frozen=True)
class ControlOutput:
    inputs: PlantInputs
    heater_cmd: float  # continuous commanded duty, before PWM
    cool_cmd: float
    steam_cmd_a: float
    sensor_fault: bool


class ChamberController:
    """Both loops of one chamber, ticked once per simulation second."""

    def __init__(
        self,
        temp_cfg: LoopConfig | None = None,
        rh_cfg: LoopConfig | None = None,
        temp_gains: PidGains | None = None,
        rh_gains: PidGains | None = None,
        dt: float = 1.0,
        steam_hold_band_c: float = STEAM_HOLD_BAND_C,
    ) -> None:
        self.temp_cfg = temp_cfg or LoopConfig("temperature")
        self.rh_cfg = rh_cfg or LoopConfig("humidity")
        self.temp_gains = temp_gains or default_gains("temperature")
        self.rh_gains = rh_gains or default_gains("humidity")
        self.steam_hold_band_c = steam_hold_band_c
        self.temp_state = PidState()
        self.rh_state = PidState()
        self.dt = dt
        self.suspended = False  # true while an autotune owns the loops

    def _feedback(
        self, readings: list[SensorReading], cfg: LoopConfig, field: str
    ) -> tuple[float, bool]:
        if isinstance(cfg.feedback, int):
            chosen = readings[cfg.feedback - 1]
            if chosen.ok:
                return getattr(chosen, field), False
        healthy = [r for r in readings if r.ok]
        if not healthy:
            return math.nan, True
        # either the configured average, or a fallback because the chosen
        # sensor is out (which counts as a fault)
        mean = sum(getattr(r, field) for r in healthy) / len(healthy)
        return mean, not isinstance(cfg.feedback, str)

    def tick(
        self,
        plant: ChamberPlant,
        sp_t: float,
        sp_rh: float,
        sim_t: float,
        blower_on: bool = True,
        door_open: bool = False,
        readings: list[SensorReading] | None = None,
    ) -> ControlOutput:
        """One control step. ``readings`` lets a caller that already sampled
        the sensors this tick share the scan instead of paying for a second
        one (reads are pure in sim time, so the values would be identical)."""
        if self.suspended:
            return ControlOutput(
                PlantInputs(blower_on=blower_on, door_open=door_open), 0.0, 0.0, 0.0, False
            )
        if readings is None:
            readings = plant.readings()
        pv_t, fault_t = self._feedback(readings, self.temp_cfg, "t_c")
        pv_rh, fault_rh = self._feedback(readings, self.rh_cfg, "rh_pct")

        u_t, self.temp_state = pid_step(self.temp_gains, self.temp_state, sp_t, pv_t, self.dt)
        # humidify only once temperature is close. Relative humidity tracks
        # the temperature the chamber happens to be at, and there is no
        # dryer: moisture added while the box is off-temperature is trapped
        # when it arrives on-temperature.
        if math.isfinite(pv_t) and abs(sp_t - pv_t) > self.steam_hold_band_c:
            u_rh = 0.0
        else:
            u_rh, self.rh_state = pid_step(self.rh_gains, self.rh_state, sp_rh, pv_rh, self.dt)

        heater_cmd, cool_cmd = split_range(u_t, self.temp_cfg.deadband)
        _, steam_a = analog_out(u_rh)
        period = self.temp_cfg.pwm_period_s
        inputs = PlantInputs(
            heater_duty=1.0 if pwm_modulate(heater_cmd, period, sim_t, self.dt) else 0.0,
            cool_duty=1.0 if pwm_modulate(cool_cmd, period, sim_t, self.dt) else 0.0,
            steam_current_a=steam_a,
            blower_on=blower_on,
            door_open=door_open,
        )
        fault = fault_t or fault_rh or self.temp_state.sensor_fault or self.rh_state.sensor_fault
        return ControlOutput(inputs, heater_cmd, cool_cmd, steam_a, fault)
