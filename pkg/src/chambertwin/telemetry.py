"""Telemetry sample model and its canonical JSON form.

One sample is one consistent register snapshot of one chamber. The JSON
rendering is canonical: keys sorted, separators compact, every float
rounded to two decimals at construction time, so identical samples always
serialize to identical bytes and golden tests can compare payloads
directly.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone

from .regmap import BlockView

CHAMBERS = ("A", "B", "C", "D")
TOPIC_TEMPLATE = "stability/{site}/{chamber}/telemetry"


class TelemetryError(ValueError):
    """Payload violates the telemetry schema."""


def telemetry_topic(site: str, chamber: str) -> str:
    return TOPIC_TEMPLATE.format(site=site, chamber=chamber)


def iso_utc(epoch_ms: int) -> str:
    # time.gmtime plus one f-string; datetime.strftime costs several times
    # as much and this runs for every sample of every poll cycle
    t = time.gmtime(epoch_ms // 1000)
    return (
        f"{t.tm_year:04d}-{t.tm_mon:02d}-{t.tm_mday:02d}"
        f"T{t.tm_hour:02d}:{t.tm_min:02d}:{t.tm_sec:02d}Z"
    )


def parse_iso_utc(ts: str) -> int:
    """Epoch milliseconds for a strict ``YYYY-MM-DDThh:mm:ssZ`` string."""
    if (
        len(ts) != 20
        or ts[4] != "-" or ts[7] != "-" or ts[10] != "T"
        or ts[13] != ":" or ts[16] != ":" or ts[19] != "Z"
    ):
        raise ValueError(f"time data {ts!r} does not match format '%Y-%m-%dT%H:%M:%SZ'")
    try:
        stamp = datetime(
            int(ts[0:4]), int(ts[5:7]), int(ts[8:10]),
            int(ts[11:13]), int(ts[14:16]), int(ts[17:19]),
            tzinfo=timezone.utc,
        )
        epoch_ms = int(stamp.timestamp()) * 1000
        canonical = iso_utc(epoch_ms)
    except (OverflowError, OSError) as exc:
        raise ValueError(f"timestamp {ts!r} out of supported range") from exc
    if canonical != ts:
        # int() is laxer than the format (signs, spaces, unicode digits);
        # re-rendering catches everything the slice checks let through
        raise ValueError(f"time data {ts!r} does not match format '%Y-%m-%dT%H:%M:%SZ'")
    return epoch_ms


@dataclass(frozen=True)
class SensorValue:
    id: int
    t_c: float
    rh_pct: float


@dataclass(frozen=True)
class TelemetrySample:
    ts: str
    chamber: str
    sensors: tuple[SensorValue, ...]
    pressure_inwc: float
    sp_t_c: float
    sp_rh_pct: float
    heater_duty: float
    cool_duty: float
    steam_current_a: float
    alarm_word: int

    def __post_init__(self) -> None:
        if self.chamber not in CHAMBERS:
            raise TelemetryError(f"unknown chamber {self.chamber!r}")
        if len(self.sensors) != 7:
            raise TelemetryError(f"expected 7 sensors, got {len(self.sensors)}")
        if tuple(s.id for s in self.sensors) != (1, 2, 3, 4, 5, 6, 7):
            raise TelemetryError("sensor ids must be 1..7 in order")
        if not 0 <= self.alarm_word <= 0xFFFF:
            raise TelemetryError(f"alarm word {self.alarm_word} out of u16 range")
        parse_iso_utc(self.ts)  # raises on malformed timestamps

    def to_dict(self) -> dict:
        return {
            "ts": self.ts,
            "chamber": self.chamber,
            "sensors": [
                {"id": s.id, "t_c": s.t_c, "rh_pct": s.rh_pct} for s in self.sensors
            ],
            "pressure_inwc": self.pressure_inwc,
            "setpoint": {"t_c": self.sp_t_c, "rh_pct": self.sp_rh_pct},
            "duties": {
                "heater": self.heater_duty,
                "cool": self.cool_duty,
                "steam_a": self.steam_current_a,
            },
            "alarm_word": self.alarm_word,
        }

    def canonical_json(self) -> bytes:
        # cached: the gateway serializes each sample for MQTT and again for
        # the historian push, and the sample is immutable anyway
        try:
            return self._canonical  # type: ignore[attr-defined]
        except AttributeError:
            data = canonical_json(self.to_dict())
            object.__setattr__(self, "_canonical", data)
            return data

    @property
    def key(self) -> tuple[str, str]:
        """Idempotency key used by the historian."""
        return (self.chamber, self.ts)


def canonical_json(obj: object) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")


def from_block(chamber: str, view: BlockView) -> TelemetrySample:
    sensors = tuple(
        SensorValue(i + 1, round(t, 2), round(rh, 2))
        for i, (t, rh) in enumerate(view.sensors)
    )
    return TelemetrySample(
        ts=iso_utc(view.epoch_ms),
        chamber=chamber,
        sensors=sensors,
        pressure_inwc=round(view.pressure_inwc, 2),
        sp_t_c=round(view.sp_t_c, 2),
        sp_rh_pct=round(view.sp_rh_pct, 2),
        heater_duty=round(view.heater_duty, 2),
        cool_duty=round(view.cool_duty, 2),
        steam_current_a=round(view.steam_current_a, 2),
        alarm_word=view.alarm_word,
    )


def parse_sample(payload: bytes | str | dict) -> TelemetrySample:
    """Validate an incoming JSON document against the schema."""
    if isinstance(payload, (bytes, str)):
        try:
            doc = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise TelemetryError(f"not JSON: {exc}") from exc
    else:
        doc = payload
    if not isinstance(doc, dict):
        raise TelemetryError("sample must be a JSON object")
    try:
        sensors = tuple(
            SensorValue(int(s["id"]), float(s["t_c"]), float(s["rh_pct"]))
            for s in doc["sensors"]
        )
        return TelemetrySample(
            ts=str(doc["ts"]),
            chamber=str(doc["chamber"]),
            sensors=sensors,
            pressure_inwc=float(doc["pressure_inwc"]),
            sp_t_c=float(doc["setpoint"]["t_c"]),
            sp_rh_pct=float(doc["setpoint"]["rh_pct"]),
            heater_duty=float(doc["duties"]["heater"]),
            cool_duty=float(doc["duties"]["cool"]),
            steam_current_a=float(doc["duties"]["steam_a"]),
            alarm_word=int(doc["alarm_word"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TelemetryError):
            raise
        raise TelemetryError(f"malformed sample: {exc!r}") from exc
