"""Two-stage PID autotuning: open-loop step identification, then relay refinement.

Stage one (pretune) applies an open-loop step, fits a first-order-plus-dead-time
model and returns Chien-Hrones-Reswick 0%-overshoot setpoint gains. When the
response settles inside the observation budget the classic two-point (28.3% /
63.2%) fit is used; when the excursion guard cuts the experiment short, the
model is fitted to the truncated rise by least squares instead. The guard is
not optional politeness: a 30% heater step on the real chamber would settle
far above the temperature guard band.

Stage two (finetune) runs an Astrom-Hagglund relay with hysteresis around the
setpoint, measures the limit cycle, converts it to an ultimate gain via
K_u = 4d / (pi * a), and returns classic Ziegler-Nichols PID gains.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Protocol

from .control import (
    PWM_PERIOD_S,
    ChamberController,
    PidGains,
    default_gains,
    pwm_modulate,
    split_range,
)
from .plant import ChamberPlant, PlantInputs


class TuningFailed(RuntimeError):
    """The experiment produced no usable model (flat response, no limit cycle)."""


class TunablePlant(Protocol):
    def measure(self) -> float: ...
    def drive(self, u: float) -> None: ...
    def advance(self, dt: float) -> None: ...


@dataclass(frozen=True)
class FopdtFit:
    gain: float
    tau_s: float
    dead_time_s: float
    truncated: bool


@dataclass(frozen=True)
class RelayResult:
    amplitude: float
    period_s: float
    ultimate_gain: float
    mean_pv: float
    cycles: int


def _baseline(plant: TunablePlant, u_base: float, dt: float, duration_s: float):
    """Quiet-period observation: (level at end, residual sigma, drift per second).

    The drift estimate matters on the real chamber, where blower heat keeps
    the bulk creeping even with both loops idle; identification subtracts it.
    """
    plant.drive(u_base)
    samples = []
    for _ in range(max(3, int(round(duration_s / dt)))):
        plant.advance(dt)
        samples.append(plant.measure())
    n = len(samples)
    ts = [i * dt for i in range(n)]
    t_mean = statistics.fmean(ts)
    y_mean = statistics.fmean(samples)
    den = sum((t - t_mean) ** 2 for t in ts)
    slope = sum((t - t_mean) * (y - y_mean) for t, y in zip(ts, samples)) / den
    residuals = [y - (y_mean + slope * (t - t_mean)) for t, y in zip(ts, samples)]
    sigma = statistics.pstdev(residuals) if n > 1 else 0.0
    # a noise-fitted slope extrapolated over a long experiment does far more
    # damage than an uncorrected real drift, so demand clear significance
    slope_se = (sigma / math.sqrt(den)) if den > 0.0 else math.inf
    if abs(slope) <= 3.0 * slope_se:
        slope = 0.0
    level_end = y_mean + slope * (ts[-1] - t_mean)
    return level_end, sigma, slope


def _cross_time(ts: list[float], ys: list[float], y0: float, target: float) -> float:
    """First crossing of y0+target, linearly interpolated between samples."""
    level = y0 + target
    rising = target >= 0.0
    for i in range(1, len(ys)):
        hit = ys[i] >= level if rising else ys[i] <= level
        if hit:
            span = ys[i] - ys[i - 1]
            frac = 0.0 if span == 0.0 else (level - ys[i - 1]) / span
            return ts[i - 1] + frac * (ts[i] - ts[i - 1])
    raise TuningFailed(f"response never crossed {level:.4g}")


def _fit_truncated(
    ts: list[float], ys: list[float], y0: float, delta_u: float, start_s: float
) -> tuple[float, float, float]:
    """Least-squares FOPDT fit to a rise that was cut off before settling."""
    t_end = ts[-1]
    best = None
    tau_grid = [t_end * (10.0 ** (e / 8.0)) for e in range(-12, 17)]  # ~0.03x..100x
    lag_grid = [start_s * f / 4.0 for f in range(0, 9)]
    for _ in range(2):
        for tau in tau_grid:
            for lag in lag_grid:
                num = den = 0.0
                for t, y in zip(ts, ys):
                    if t <= lag:
                        continue
                    m = 1.0 - math.exp(-(t - lag) / tau)
                    num += m * (y - y0)
                    den += m * m
                if den == 0.0:
                    continue
                scale = num / den
                sse = 0.0
                for t, y in zip(ts, ys):
                    m = scale * (1.0 - math.exp(-(t - lag) / tau)) if t > lag else 0.0
                    sse += (y - y0 - m) ** 2
                if best is None or sse < best[0]:
                    best = (sse, tau, lag, scale)
        _, tau_c, lag_c, _ = best
        tau_grid = [tau_c * (10.0 ** (e / 40.0)) for e in range(-6, 7)]
        lag_step = max(start_s / 8.0, 1e-3)
        lag_grid = [max(0.0, lag_c + lag_step * k) for k in range(-3, 4)]
    _, tau, lag, scale = best
    return scale / delta_u, tau, lag


def step_identify(
    plant: TunablePlant,
    *,
    step: float = 0.3,
    u_base: float = 0.0,
    dt: float = 1.0,
    baseline_s: float = 10.0,
    timeout_s: float = 8 * 3600.0,
    max_excursion: float | None = None,
) -> FopdtFit:
    """Apply an open-loop step and fit (K, tau, L).

    Raises TuningFailed when the response is too flat to carry a model.
    """
    if step == 0.0:
        raise ValueError("step must be nonzero")
    y0, sigma, drift = _baseline(plant, u_base, dt, baseline_s)
    detect = max(4.0 * sigma, 1e-6)
    flat = max(8.0 * sigma, 1e-9)

    plant.drive(u_base + step)
    ts: list[float] = []
    ys: list[float] = []
    t = 0.0
    started_at: float | None = None
    truncated = False
    while t < timeout_s:
        plant.advance(dt)
        t += dt
        y = plant.measure() - drift * t
        ts.append(t)
        ys.append(y)
        dy = y - y0
        if started_at is None and abs(dy) > detect:
            started_at = t
        if started_at is None:
            continue
        if max_excursion is not None and abs(dy) >= max_excursion:
            truncated = True
            break
        # settled when the tail is flat relative to the rise so far
        since = len([x for x in ts if x >= started_at])
        window = max(20, since // 5)
        if since > 3 * window and len(ys) > window:
            tail = abs(ys[-1] - ys[-window])
            if tail < max(0.01 * abs(dy), 2.0 * sigma / math.sqrt(window)):
                break
    if started_at is None or abs(ys[-1] - y0) < flat:
        raise TuningFailed("response too flat: process gain indistinguishable from zero")

    if truncated:
        gain, tau, lag = _fit_truncated(ts, ys, y0, step, started_at)
        return FopdtFit(gain, tau, max(lag, 0.0), True)

    tail_n = max(3, len(ys) // 20)
    y_inf = statistics.fmean(ys[-tail_n:])
    delta_y = y_inf - y0
    t63 = _cross_time(ts, ys, y0, 0.632 * delta_y)
    t28 = _cross_time(ts, ys, y0, 0.283 * delta_y)
    tau = 1.5 * (t63 - t28)
    lag = max(0.0, t63 - tau)
    return FopdtFit(delta_y / step, tau, lag, False)


def chr_gains(fit: FopdtFit, loop_kind: str, dt: float = 1.0) -> PidGains:
    """Chien-Hrones-Reswick setpoint rules, 0% overshoot, PID form."""
    base = default_gains(loop_kind)
    lag = max(fit.dead_time_s, dt)
    kp = 0.6 * fit.tau_s / (fit.gain * lag)
    # a truncated fit pins K/tau well but tau itself only loosely; keep the
    # integral slow enough that a low tau estimate cannot erode the margin
    ti = max(fit.tau_s, 5.0 * lag)
    return PidGains(
        kp=kp,
        ti_s=ti,
        td_s=0.5 * lag,
        out_min=base.out_min,
        out_max=base.out_max,
        sample_time_s=dt,
    )


def pretune(
    plant: TunablePlant,
    loop_kind: str = "temperature",
    *,
    step: float = 0.3,
    dt: float = 1.0,
    max_excursion: float | None = None,
    timeout_s: float = 8 * 3600.0,
) -> PidGains:
    fit = step_identify(
        plant, step=step, dt=dt, max_excursion=max_excursion, timeout_s=timeout_s
    )
    return chr_gains(fit, loop_kind, dt)


def relay_characterize(
    plant: TunablePlant,
    *,
    setpoint: float | None = None,
    amplitude: float = 0.1,
    u_bias: float = 0.0,
    hysteresis: float | None = None,
    dt: float = 1.0,
    baseline_s: float = 10.0,
    min_cycles: int = 3,
    max_cycles: int = 60,
    timeout_s: float = 6 * 3600.0,
) -> RelayResult:
    """Run the relay experiment and measure the limit cycle."""
    if amplitude <= 0.0:
        raise ValueError("amplitude must be > 0")
    y0, sigma, _ = _baseline(plant, u_bias, dt, baseline_s)
    sp = y0 if setpoint is None else setpoint
    eps = hysteresis if hysteresis is not None else max(4.0 * sigma, 1e-3)
    min_dwell = 3.0 * dt

    pv = plant.measure()
    high = pv <= sp
    toggles: list[float] = []
    seg_min = seg_max = pv
    cycle_periods: list[float] = []
    cycle_amplitudes: list[float] = []
    cycle_means: list[float] = []
    seg_extrema: list[tuple[float, float]] = []
    t = 0.0
    last_toggle = -min_dwell
    while t < timeout_s:
        plant.drive(u_bias + (amplitude if high else -amplitude))
        plant.advance(dt)
        t += dt
        pv = plant.measure()
        seg_min = min(seg_min, pv)
        seg_max = max(seg_max, pv)
        crossed = (pv > sp + eps) if high else (pv < sp - eps)
        if crossed and (t - last_toggle) >= min_dwell:
            high = not high
            toggles.append(t)
            last_toggle = t
            seg_extrema.append((seg_min, seg_max))
            seg_min = seg_max = pv
            if len(toggles) >= 3 and len(toggles) % 2 == 1:
                # one full cycle spans two consecutive same-direction toggles
                cycle_periods.append(toggles[-1] - toggles[-3])
                lo = min(seg_extrema[-1][0], seg_extrema[-2][0])
                hi = max(seg_extrema[-1][1], seg_extrema[-2][1])
                cycle_amplitudes.append((hi - lo) / 2.0)
                cycle_means.append((hi + lo) / 2.0)
            if len(cycle_periods) >= min_cycles + 2:
                # switching instants quantize to the actuation window, so the
                # period jitters in whole-window steps; judge against a median
                recent = cycle_periods[-4:]
                med = statistics.median(recent)
                if all(abs(p - med) <= 0.15 * med for p in recent):
                    break
            if len(cycle_periods) >= max_cycles:
                raise TuningFailed("limit cycle period refused to converge")
    if len(cycle_periods) < min_cycles:
        raise TuningFailed(
            f"no sustained limit cycle ({len(cycle_periods)} cycles in {t:.0f} s); "
            "the process may be one-sided around this operating point"
        )
    use = min(5, len(cycle_periods))
    period = statistics.median(cycle_periods[-use:])
    amp = statistics.median(cycle_amplitudes[-use:])
    if amp <= 0.0:
        raise TuningFailed("zero oscillation amplitude")
    return RelayResult(
        amplitude=amp,
        period_s=period,
        ultimate_gain=4.0 * amplitude / (math.pi * amp),
        mean_pv=statistics.fmean(cycle_means[-use:]),
        cycles=len(cycle_periods),
    )


def finetune(
    plant: TunablePlant,
    gains: PidGains | None = None,
    *,
    loop_kind: str = "temperature",
    setpoint: float | None = None,
    amplitude: float = 0.1,
    hysteresis: float | None = None,
    dt: float = 1.0,
    timeout_s: float = 6 * 3600.0,
) -> PidGains:
    """Relay experiment followed by classic Ziegler-Nichols PID rules."""
    base = gains or default_gains(loop_kind)
    u_bias = 0.0 if base.out_min < 0.0 else max(base.out_min, min(base.out_max, amplitude))
    result = relay_characterize(
        plant,
        setpoint=setpoint,
        amplitude=amplitude,
        u_bias=u_bias,
        hysteresis=hysteresis,
        dt=dt,
        timeout_s=timeout_s,
    )
    return PidGains(
        kp=0.6 * result.ultimate_gain,
        ti_s=0.5 * result.period_s,
        td_s=0.125 * result.period_s,
        out_min=base.out_min,
        out_max=base.out_max,
        sample_time_s=dt,
    )


class ChamberLoopRig:
    """Adapts one loop of a chamber twin to the tuning protocol.

    Temperature mode pushes the drive through the same split-range and
    window quantization the production loop uses, so the identified dead
    time includes the actuation chain. Skipping that (driving the duty
    continuously) yields a dead time near zero and setpoint rules then
    produce a proportional gain the quantized loop cannot stomach.
    Humidity mode drives the steam current while an ordinary PI loop holds
    temperature at a fixed point so the psychrometric coupling does not
    pollute the fit.
    """

    def __init__(
        self,
        plant: ChamberPlant,
        loop_kind: str,
        feedback: int = 1,
        hold_t_c: float | None = None,
    ) -> None:
        if loop_kind not in ("temperature", "humidity"):
            raise ValueError(f"unknown loop kind {loop_kind!r}")
        self.plant = plant
        self.loop_kind = loop_kind
        self.feedback = feedback
        self.hold_t_c = hold_t_c
        self._u = 0.0
        self._holder = ChamberController() if hold_t_c is not None else None
        self._sim_t = plant.state.sim_time_s

    def measure(self) -> float:
        reading = self.plant.sensor_read(self.feedback)
        return reading.t_c if self.loop_kind == "temperature" else reading.rh_pct

    def drive(self, u: float) -> None:
        self._u = u

    def advance(self, dt: float) -> None:
        if self.loop_kind == "temperature":
            u = max(-1.0, min(1.0, self._u))
            heater_cmd, cool_cmd = split_range(u)
            inputs = PlantInputs(
                heater_duty=1.0 if pwm_modulate(heater_cmd, PWM_PERIOD_S, self._sim_t, dt) else 0.0,
                cool_duty=1.0 if pwm_modulate(cool_cmd, PWM_PERIOD_S, self._sim_t, dt) else 0.0,
            )
        else:
            steam = 25.0 * max(0.0, min(1.0, self._u))
            heater_duty = cool_duty = 0.0
            if self._holder is not None:
                out = self._holder.tick(
                    self.plant, self.hold_t_c, 0.0, self._sim_t
                )
                heater_duty = out.inputs.heater_duty
                cool_duty = out.inputs.cool_duty
            inputs = PlantInputs(
                heater_duty=heater_duty,
                cool_duty=cool_duty,
                steam_current_a=steam,
            )
        self.plant.step(inputs, dt)
        self._sim_t += dt
