"""Deterministic keyed noise for the sensor models.

Sensor readings must depend only on (seed, channel, sim tick) so a rerun
with the same seed reproduces the trajectory byte for byte no matter how
often or in what order clients sample the sensors. A stateful RNG stream
cannot give that, so readings hash their coordinates instead (splitmix64
finalizer, stable across platforms and processes).
"""
from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def keyed_hash(seed: int, channel: int, tick: int) -> int:
    """64-bit hash of the coordinate triple.

    The three finalizer rounds are written out inline: this sits under
    every sensor sample and the call overhead of a helper per round is
    measurable at accelerated time. Keep in sync with ``_mix``.
    """
    x = (seed + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    x = ((x ^ (x >> 31)) ^ (channel + _GOLDEN)) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    x = ((x ^ (x >> 31)) ^ (tick + _GOLDEN)) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def keyed_uniform(seed: int, channel: int, tick: int) -> float:
    """Uniform in [0, 1), a pure function of the coordinates."""
    return keyed_hash(seed, channel, tick) / float(1 << 64)


def keyed_gauss(seed: int, channel: int, tick: int) -> float:
    """Standard normal via Box-Muller, a pure function of the coordinates."""
    h = keyed_hash(seed, channel, tick)
    u1 = ((h >> 32) + 1) / 4294967297.0  # (0, 1], keeps log() finite
    u2 = (h & 0xFFFFFFFF) / 4294967296.0
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
