"""Small deterministic plants used by the tuning tests.

These implement the measure/drive/advance protocol without any chamber
physics so the identification math can be checked against known models.
"""
from __future__ import annotations

from collections import deque


class FopdtPlant:
    """First-order-plus-dead-time process, forward-Euler integrated.

    The delay line holds exactly ``dead_time_s / dt`` past inputs: popleft
    first, then append, so an input applied at time t first moves the state
    at t + dead_time_s and not one step early.
    """

    def __init__(
        self,
        gain: float,
        tau_s: float,
        dead_time_s: float,
        dt: float = 1.0,
        y0: float = 0.0,
        noise: float = 0.0,
        seed: int = 1,
    ) -> None:
        self.gain = gain
        self.tau_s = tau_s
        self.dt = dt
        self.y = y0
        self.u = 0.0
        steps = int(round(dead_time_s / dt))
        self.lag = deque([0.0] * steps, maxlen=steps or 1)
        self.has_lag = steps > 0
        self.noise = noise
        import random

        self._rng = random.Random(seed)

    def measure(self) -> float:
        if self.noise:
            return self.y + self._rng.gauss(0.0, self.noise)
        return self.y

    def drive(self, u: float) -> None:
        self.u = u

    def advance(self, dt: float) -> None:
        n = max(1, int(round(dt / self.dt)))
        for _ in range(n):
            if self.has_lag:
                u_eff = self.lag.popleft()
                self.lag.append(self.u)
            else:
                u_eff = self.u
            self.y += (self.gain * u_eff - self.y) / self.tau_s * self.dt


class IntegratorPlant:
    """Pure integrator with a small delay; relay cycles stay symmetric."""

    def __init__(self, slope: float = 0.01, dead_time_s: float = 5.0, dt: float = 1.0) -> None:
        self.slope = slope
        self.dt = dt
        self.y = 0.0
        self.u = 0.0
        steps = int(round(dead_time_s / dt))
        self.lag = deque([0.0] * steps, maxlen=steps or 1)
        self.has_lag = steps > 0

    def measure(self) -> float:
        return self.y

    def drive(self, u: float) -> None:
        self.u = u

    def advance(self, dt: float) -> None:
        n = max(1, int(round(dt / self.dt)))
        for _ in range(n):
            if self.has_lag:
                u_eff = self.lag.popleft()
                self.lag.append(self.u)
            else:
                u_eff = self.u
            self.y += self.slope * u_eff * self.dt


class DeadPlant:
    """Measures a constant no matter the drive; nothing to identify."""

    def __init__(self, level: float = 21.0) -> None:
        self.level = level

    def measure(self) -> float:
        return self.level

    def drive(self, u: float) -> None:
        pass

    def advance(self, dt: float) -> None:
        pass


class OneSidedPlant:
    """Saturates hard at a floor; the relay can push up but never below.

    Models a loop like steam humidification in a dry chamber where the
    actuator has no authority in one direction.
    """

    def __init__(self, gain: float = 2.0, tau_s: float = 50.0, floor: float = 0.0) -> None:
        self.gain = gain
        self.tau_s = tau_s
        self.floor = floor
        self.y = floor
        self.u = 0.0

    def measure(self) -> float:
        return self.y

    def drive(self, u: float) -> None:
        self.u = u

    def advance(self, dt: float) -> None:
        target = self.gain * max(0.0, self.u)
        self.y += (target - self.y) / self.tau_s * dt
        self.y = max(self.floor, self.y)
