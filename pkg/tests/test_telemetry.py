"""Telemetry schema, canonical JSON, and timestamp handling."""
from __future__ import annotations

import pytest

from chambertwin.regmap import RegisterHub, parse_block
from chambertwin.telemetry import (
    SensorValue,
    TelemetryError,
    TelemetrySample,
    canonical_json,
    from_block,
    iso_utc,
    parse_iso_utc,
    parse_sample,
    telemetry_topic,
)

EPOCH_MS = 1714663800000  # 2024-05-02 15:30:00 UTC


def _sensors(t=40.0, rh=75.0):
    return tuple(SensorValue(i + 1, t, rh) for i in range(7))


def _sample(**overrides):
    fields = dict(
        ts="2024-05-02T15:30:00Z",
        chamber="A",
        sensors=_sensors(),
        pressure_inwc=0.5,
        sp_t_c=40.0,
        sp_rh_pct=75.0,
        heater_duty=0.25,
        cool_duty=0.0,
        steam_current_a=6.5,
        alarm_word=0,
    )
    fields.update(overrides)
    return TelemetrySample(**fields)


class TestTimestamps:
    def test_iso_utc(self):
        assert iso_utc(EPOCH_MS) == "2024-05-02T15:30:00Z"

    def test_round_trip(self):
        assert parse_iso_utc(iso_utc(EPOCH_MS)) == EPOCH_MS

    def test_bad_format_rejected(self):
        with pytest.raises(ValueError):
            parse_iso_utc("2024-05-02 15:30:00")


class TestTopic:
    def test_template(self):
        assert telemetry_topic("default", "A") == "stability/default/A/telemetry"


class TestCanonicalJson:
    def test_sorted_compact(self):
        assert canonical_json({"b": 1, "a": [1.5, "x"]}) == b'{"a":[1.5,"x"],"b":1}'

    def test_identical_samples_identical_bytes(self):
        assert _sample().canonical_json() == _sample().canonical_json()

    def test_nan_refused(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_key_order_in_payload(self):
        payload = _sample().canonical_json().decode()
        assert payload.index('"alarm_word"') < payload.index('"chamber"') < payload.index('"ts"')


class TestValidation:
    def test_unknown_chamber(self):
        with pytest.raises(TelemetryError, match="chamber"):
            _sample(chamber="E")

    def test_wrong_sensor_count(self):
        with pytest.raises(TelemetryError, match="7 sensors"):
            _sample(sensors=_sensors()[:6])

    def test_sensor_ids_must_be_ordered(self):
        sensors = list(_sensors())
        sensors[0], sensors[1] = sensors[1], sensors[0]
        with pytest.raises(TelemetryError, match="ids"):
            _sample(sensors=tuple(sensors))

    def test_alarm_word_range(self):
        with pytest.raises(TelemetryError, match="alarm word"):
            _sample(alarm_word=70000)

    def test_bad_ts(self):
        with pytest.raises(ValueError):
            _sample(ts="yesterday")


class TestParseSample:
    def test_round_trip_through_json(self):
        sample = _sample()
        assert parse_sample(sample.canonical_json()) == sample

    def test_not_json(self):
        with pytest.raises(TelemetryError, match="not JSON"):
            parse_sample(b"\x00garbage")

    def test_missing_field(self):
        doc = _sample().to_dict()
        del doc["pressure_inwc"]
        with pytest.raises(TelemetryError, match="malformed"):
            parse_sample(doc)

    def test_non_object(self):
        with pytest.raises(TelemetryError, match="object"):
            parse_sample(b"[1,2,3]")


class TestFromBlock:
    def test_values_rounded_to_two_decimals(self):
        hub = RegisterHub()
        hub.publish(
            1,
            sensors=[(39.74, 76.14)] + [(40.004, 75.006)] * 6,
            pressure_inwc=0.5024,
            heater_duty=0.256,
            cool_duty=0.0,
            steam_current_a=6.547,
            alarm_word=3,
            status_word=1,
            epoch_ms=EPOCH_MS,
        )
        hub.set_setpoints(1, 40.0, 75.0)
        sample = from_block("A", parse_block(hub.snapshot(1)))
        assert sample.ts == "2024-05-02T15:30:00Z"
        assert sample.sensors[0].t_c == 39.74
        assert sample.sensors[0].rh_pct == 76.14
        assert sample.sensors[1].t_c == 40.0
        assert sample.pressure_inwc == 0.5
        assert sample.heater_duty == 0.26
        assert sample.steam_current_a == 6.55
        assert sample.alarm_word == 3
        payload = sample.canonical_json().decode()
        assert '"t_c":39.74' in payload
        assert '"rh_pct":76.14' in payload
