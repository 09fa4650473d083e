"""Virtual PLC register image: four byte-addressed data blocks, big-endian.

Each chamber owns one 256-byte block (DB 1..4). The simulation publishes
sensor values, duties and status words; supervisory clients write setpoints
and controller gains through the TCP server in :mod:`chambertwin.wire`.

Block layout (all multi-byte values big-endian, floats IEEE-754 binary32)::

    0..55    7 x (T float32, RH float32), sensor 1 first
    56..59   duct pressure, inches of water column, float32
    60..63   temperature setpoint, float32
    64..67   relative humidity setpoint, float32
    68..71   heater duty 0..1, float32
    72..75   chilled-water duty 0..1, float32
    76..79   steam valve current, mA, float32
    80..81   alarm word, u16
    82..83   status word, u16
    84..91   simulation epoch, ms since Unix epoch, u64
    92..115  PID gains, 6 x float32: T kp, ti, td then RH kp, ti, td
    116..255 reserved, zero

Offsets 0..59 belong to the simulation; external writes there are refused.
The published image is swapped in whole so a concurrent reader always sees
one self-consistent snapshot and never a half-written float.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

BLOCK_SIZE = 256
DB_IDS = (1, 2, 3, 4)

OFF_SENSORS = 0
OFF_PRESSURE = 56
OFF_SP_T = 60
OFF_SP_RH = 64
OFF_DUTY_HEATER = 68
OFF_DUTY_COOL = 72
OFF_STEAM_A = 76
OFF_ALARM_WORD = 80
OFF_STATUS_WORD = 82
OFF_EPOCH_MS = 84
OFF_GAINS = 92
SIM_OWNED_END = 60  # external writes below this offset are rejected

# alarm word bits
ALARM_DEVIATION_T = 1 << 0
ALARM_DEVIATION_RH = 1 << 1
ALARM_BLOWER_FAIL = 1 << 2
ALARM_SENSOR_FAIL = 1 << 3
ALARM_TUNING_FAIL = 1 << 4
ALARM_UNIT_FAILOVER = 1 << 5

# status word bits
STATUS_BLOWER_ON = 1 << 0
STATUS_HEATER_UNIT2 = 1 << 1
STATUS_COOL_UNIT2 = 1 << 2
STATUS_STEAM_UNIT2 = 1 << 3
STATUS_TUNING = 1 << 4
STATUS_DOOR_OPEN = 1 << 5

CHAMBER_DBS = {"A": 1, "B": 2, "C": 3, "D": 4}
DB_CHAMBERS = {v: k for k, v in CHAMBER_DBS.items()}


class RegisterError(Exception):
    """Base for register access failures; ``code`` matches the wire ERR byte."""

    code = 0x02


class BoundsError(RegisterError):
    code = 0x02


class ReadOnlyError(RegisterError):
    code = 0x03


def encode_f32(value: float) -> bytes:
    return struct.pack(">f", value)


def decode_f32(raw: bytes) -> float:
    return struct.unpack(">f", raw)[0]


def _check_range(db: int, offset: int, length: int) -> None:
    if db not in DB_IDS:
        raise BoundsError(f"no data block {db}")
    if offset < 0 or length < 0 or offset + length > BLOCK_SIZE:
        raise BoundsError(f"range {offset}+{length} exceeds block size {BLOCK_SIZE}")


@dataclass(frozen=True)
class BlockView:
    """Decoded snapshot of one data block."""

    sensors: tuple[tuple[float, float], ...]  # (t_c, rh_pct) x 7
    pressure_inwc: float
    sp_t_c: float
    sp_rh_pct: float
    heater_duty: float
    cool_duty: float
    steam_current_a: float
    alarm_word: int
    status_word: int
    epoch_ms: int
    t_gains: tuple[float, float, float]
    rh_gains: tuple[float, float, float]


# sensors, pressure, setpoints, duties, words, epoch, gains in one unpack;
# the offsets above describe exactly this layout
_BLOCK_STRUCT = struct.Struct(">14f6fHHQ6f")


def parse_block(raw: bytes) -> BlockView:
    if len(raw) < OFF_GAINS + 24:
        raise ValueError(f"block snapshot too short: {len(raw)} bytes")
    v = _BLOCK_STRUCT.unpack_from(raw, 0)
    return BlockView(
        sensors=tuple((v[i], v[i + 1]) for i in range(0, 14, 2)),
        pressure_inwc=v[14],
        sp_t_c=v[15],
        sp_rh_pct=v[16],
        heater_duty=v[17],
        cool_duty=v[18],
        steam_current_a=v[19],
        alarm_word=v[20],
        status_word=v[21],
        epoch_ms=v[22],
        t_gains=v[23:26],
        rh_gains=v[26:29],
    )


class RegisterHub:
    """All four block images plus the access rules.

    The simulation publishes by building a fresh image and swapping the
    reference, so readers need no lock for a tear-free snapshot. External
    writes and publishes serialize on one mutex to avoid lost updates.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._images: dict[int, bytes] = {db: bytes(BLOCK_SIZE) for db in DB_IDS}

    def snapshot(self, db: int) -> bytes:
        _check_range(db, 0, 0)
        return self._images[db]

    def read(self, db: int, offset: int, length: int) -> bytes:
        _check_range(db, offset, length)
        return self._images[db][offset : offset + length]

    def write(self, db: int, offset: int, data: bytes) -> None:
        """External write; the simulation-owned region is refused."""
        _check_range(db, offset, len(data))
        if offset < SIM_OWNED_END:
            raise ReadOnlyError(
                f"offsets 0..{SIM_OWNED_END - 1} are simulation-owned"
            )
        self._write_raw(db, offset, data)

    def seed(self, db: int, offset: int, data: bytes) -> None:
        """Internal write without the ownership check (startup, publishes)."""
        _check_range(db, offset, len(data))
        self._write_raw(db, offset, data)

    def _write_raw(self, db: int, offset: int, data: bytes) -> None:
        with self._lock:
            image = bytearray(self._images[db])
            image[offset : offset + len(data)] = data
            self._images[db] = bytes(image)

    def publish(
        self,
        db: int,
        *,
        sensors: list[tuple[float, float]],
        pressure_inwc: float,
        heater_duty: float,
        cool_duty: float,
        steam_current_a: float,
        alarm_word: int,
        status_word: int,
        epoch_ms: int,
    ) -> None:
        """One simulation tick's worth of state, applied atomically."""
        if len(sensors) != 7:
            raise ValueError("expected 7 sensor pairs")
        sim = struct.pack(
            ">14f", *[v for pair in sensors for v in pair]
        ) + encode_f32(pressure_inwc)
        tail = (
            struct.pack(">3f", heater_duty, cool_duty, steam_current_a)
            + struct.pack(">HH", alarm_word & 0xFFFF, status_word & 0xFFFF)
            + struct.pack(">Q", epoch_ms)
        )
        with self._lock:
            image = bytearray(self._images[db])
            image[OFF_SENSORS : OFF_SENSORS + 60] = sim
            image[OFF_DUTY_HEATER : OFF_DUTY_HEATER + 24] = tail
            self._images[db] = bytes(image)

    # typed helpers used by the facility loop

    def setpoints(self, db: int) -> tuple[float, float]:
        raw = self.read(db, OFF_SP_T, 8)
        return decode_f32(raw[0:4]), decode_f32(raw[4:8])

    def set_setpoints(self, db: int, t_c: float, rh_pct: float) -> None:
        self.seed(db, OFF_SP_T, encode_f32(t_c) + encode_f32(rh_pct))

    def gains(self, db: int) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        vals = struct.unpack(">6f", self.read(db, OFF_GAINS, 24))
        return vals[0:3], vals[3:6]

    def set_gains(
        self,
        db: int,
        t_gains: tuple[float, float, float],
        rh_gains: tuple[float, float, float],
    ) -> None:
        self.seed(db, OFF_GAINS, struct.pack(">6f", *t_gains, *rh_gains))
