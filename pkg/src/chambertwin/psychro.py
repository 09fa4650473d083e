"""Moist-air property conversions used by the chamber physics and displays.

Pressures are kPa, temperatures deg C, humidity ratio kg water vapor per kg
dry air. Saturation vapor pressure uses the Magnus form with the
Alduchov-Eskridge coefficients, good to a few tenths of a percent across
the chamber operating range. Total pressure is treated as constant; the
duct static pressure is orders of magnitude below atmospheric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

ATM_KPA = 101.325
MW_RATIO = 0.622  # molecular weight ratio, water vapor over dry air

_MAGNUS_ES0_KPA = 0.61094
_MAGNUS_A = 17.625
_MAGNUS_B_C = 243.04

T_MIN_C = -40.0
T_MAX_C = 100.0

_DEW_FLOOR_C = -60.0


class PsychroDomainError(ValueError):
    """Raised when an input falls outside the supported property range."""


@dataclass(frozen=True)
class MoistAir:
    """A moist-air state: dry-bulb temperature, humidity ratio, pressure."""

    t_c: float
    w: float
    p_kpa: float = ATM_KPA

    def __post_init__(self) -> None:
        if not math.isfinite(self.t_c):
            raise PsychroDomainError("t_c must be finite")
        if not (self.w >= 0.0):
            raise PsychroDomainError(f"humidity ratio must be >= 0, got {self.w}")
        if not (self.p_kpa > 0.0):
            raise PsychroDomainError(f"pressure must be > 0, got {self.p_kpa}")


def saturation_vapor_pressure(t_c: float) -> float:
    """Saturation vapor pressure over liquid water in kPa (Magnus form)."""
    if not math.isfinite(t_c) or not (T_MIN_C <= t_c <= T_MAX_C):
        raise PsychroDomainError(f"temperature {t_c!r} outside [{T_MIN_C}, {T_MAX_C}] C")
    return _MAGNUS_ES0_KPA * math.exp(_MAGNUS_A * t_c / (t_c + _MAGNUS_B_C))


def vapor_pressure(w: float, p_kpa: float = ATM_KPA) -> float:
    """Partial pressure of water vapor for humidity ratio w, in kPa."""
    if not (w >= 0.0):
        raise PsychroDomainError(f"humidity ratio must be >= 0, got {w}")
    return w * p_kpa / (MW_RATIO + w)


def relative_humidity(air: MoistAir) -> float:
    """Relative humidity in percent for a moist-air state."""
    return 100.0 * vapor_pressure(air.w, air.p_kpa) / saturation_vapor_pressure(air.t_c)


def humidity_ratio(t_c: float, rh_pct: float, p_kpa: float = ATM_KPA) -> float:
    """Humidity ratio (kg/kg dry air) at dry bulb t_c and relative humidity rh_pct."""
    if not (0.0 <= rh_pct <= 100.0):
        raise PsychroDomainError(f"relative humidity {rh_pct!r} outside [0, 100]")
    p_v = rh_pct / 100.0 * saturation_vapor_pressure(t_c)
    if p_v >= p_kpa:
        raise PsychroDomainError("vapor pressure at or above total pressure")
    return MW_RATIO * p_v / (p_kpa - p_v)


def saturation_humidity_ratio(t_c: float, p_kpa: float = ATM_KPA) -> float:
    return humidity_ratio(t_c, 100.0, p_kpa)


def dew_point(t_c: float, rh_pct: float) -> float:
    """Dew point in deg C, found by bisection on the saturation curve.

    Converges well below 1e-4 C. rh_pct must be in (0, 100]; a dew point
    for perfectly dry air does not exist.
    """
    if not (0.0 < rh_pct <= 100.0):
        raise PsychroDomainError(f"relative humidity {rh_pct!r} outside (0, 100]")
    target = rh_pct / 100.0 * saturation_vapor_pressure(t_c)
    lo, hi = _DEW_FLOOR_C, t_c
    if _magnus_unchecked(lo) >= target:
        return lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _magnus_unchecked(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _magnus_unchecked(t_c: float) -> float:
    # bisection probes below T_MIN_C; the formula itself is well behaved there
    return _MAGNUS_ES0_KPA * math.exp(_MAGNUS_A * t_c / (t_c + _MAGNUS_B_C))
