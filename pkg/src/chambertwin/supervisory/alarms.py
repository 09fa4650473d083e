"""Alarm lifecycle engine and email-outbox notifier.

Condition alarms (deviation, blower, stale sensor) are driven by feeding
per-chamber signals into :meth:`AlarmEngine.evaluate` once per sample; each
condition must hold continuously for its dwell time before an alarm raises,
and must stay healthy for the matching dwell before it clears. Event alarms
(tuning failure, unit failover) are raised and cleared explicitly.

State machine: ACTIVE -> ACKED -> CLEARED, or ACTIVE -> CLEARED directly.
Nothing else. While a (chamber, kind) pair has an ACTIVE or ACKED alarm no
second alarm of that pair can raise; once cleared, a fresh condition gets a
fresh id.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from ..regmap import (
    ALARM_BLOWER_FAIL,
    ALARM_DEVIATION_RH,
    ALARM_DEVIATION_T,
    ALARM_SENSOR_FAIL,
    ALARM_TUNING_FAIL,
    ALARM_UNIT_FAILOVER,
)

log = logging.getLogger(__name__)

ACTIVE = "ACTIVE"
ACKED = "ACKED"
CLEARED = "CLEARED"

KIND_DEVIATION_T = "deviation_t"
KIND_DEVIATION_RH = "deviation_rh"
KIND_BLOWER_FAIL = "blower_fail"
KIND_SENSOR_FAIL = "sensor_fail"
KIND_TUNING_FAIL = "tuning_fail"
KIND_UNIT_FAILOVER = "unit_failover"

KINDS = (
    KIND_DEVIATION_T,
    KIND_DEVIATION_RH,
    KIND_BLOWER_FAIL,
    KIND_SENSOR_FAIL,
    KIND_TUNING_FAIL,
    KIND_UNIT_FAILOVER,
)

KIND_BITS = {
    KIND_DEVIATION_T: ALARM_DEVIATION_T,
    KIND_DEVIATION_RH: ALARM_DEVIATION_RH,
    KIND_BLOWER_FAIL: ALARM_BLOWER_FAIL,
    KIND_SENSOR_FAIL: ALARM_SENSOR_FAIL,
    KIND_TUNING_FAIL: ALARM_TUNING_FAIL,
    KIND_UNIT_FAILOVER: ALARM_UNIT_FAILOVER,
}

DEVIATION_TOL_T_C = 2.0
DEVIATION_TOL_RH_PCT = 5.0
DEVIATION_DWELL_S = 300.0
BLOWER_MIN_INWC = 0.1
BLOWER_DWELL_S = 10.0
SENSOR_STALE_S = 60.0

_LEGAL = {(ACTIVE, ACKED), (ACTIVE, CLEARED), (ACKED, CLEARED)}


class TransitionError(Exception):
    pass


@dataclass
class AlarmRecord:
    id: int
    chamber: str
    kind: str
    state: str
    raised_ts_ms: int
    detail: str
    acked_by: str | None = None
    acked_ts_ms: int | None = None
    cleared_ts_ms: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "chamber": self.chamber,
            "kind": self.kind,
            "state": self.state,
            "raised_ts_ms": self.raised_ts_ms,
            "detail": self.detail,
            "acked_by": self.acked_by,
            "acked_ts_ms": self.acked_ts_ms,
            "cleared_ts_ms": self.cleared_ts_ms,
        }


@dataclass(frozen=True)
class ChamberSignals:
    """One sample's worth of alarm-relevant process values for a chamber."""

    chamber: str
    t_meas: float
    rh_meas: float
    sp_t: float
    sp_rh: float
    pressure_inwc: float
    blower_on: bool
    sensor_t: tuple[float, ...] = ()
    sensor_rh: tuple[float, ...] = ()
    bad_sensors: frozenset[int] = frozenset()


Listener = Callable[[AlarmRecord, "str | None"], None]


@dataclass
class _Dwell:
    """Tracks how long a boolean condition has held, in sample time."""

    since_ms: int | None = None

    def update(self, holding: bool, now_ms: int) -> float:
        """Returns seconds the condition has held continuously (0 if not)."""
        if not holding:
            self.since_ms = None
            return 0.0
        if self.since_ms is None:
            self.since_ms = now_ms
        return (now_ms - self.since_ms) / 1000.0


@dataclass
class _SignalWatch:
    last_value: float | None = None
    changed_ms: int = 0

    def stale_s(self, value: float, now_ms: int) -> float:
        if self.last_value is None or value != self.last_value:
            self.last_value = value
            self.changed_ms = now_ms
            return 0.0
        return (now_ms - self.changed_ms) / 1000.0


_CONDITION_KINDS = (
    KIND_DEVIATION_T,
    KIND_DEVIATION_RH,
    KIND_BLOWER_FAIL,
    KIND_SENSOR_FAIL,
)


class _ChamberTrack:
    """Dwell and staleness state for one chamber.

    ``evaluate`` runs once per chamber per sample, millions of times in an
    accelerated day, so this state is grouped per chamber and reached with
    one dict probe instead of tuple-keyed lookups per condition.
    """

    __slots__ = ("out", "back", "watch_t", "watch_rh")

    def __init__(self) -> None:
        self.out = {kind: _Dwell() for kind in _CONDITION_KINDS}
        self.back = {kind: _Dwell() for kind in _CONDITION_KINDS}
        self.watch_t: list[_SignalWatch] = []
        self.watch_rh: list[_SignalWatch] = []


class AlarmEngine:
    def __init__(self, listeners: Iterable[Listener] = ()) -> None:
        self._lock = threading.RLock()
        self._listeners = list(listeners)
        self._alarms: dict[int, AlarmRecord] = {}
        self._open: dict[tuple[str, str], int] = {}
        self._next_id = 1
        self._track: dict[str, _ChamberTrack] = {}

    def add_listener(self, listener: Listener) -> None:
        self._listeners.append(listener)

    # -- queries -------------------------------------------------------

    def alarms(self, state: str | None = None) -> list[AlarmRecord]:
        with self._lock:
            records = sorted(self._alarms.values(), key=lambda a: a.id)
        if state is not None:
            records = [a for a in records if a.state == state]
        return records

    def get(self, alarm_id: int) -> AlarmRecord | None:
        with self._lock:
            return self._alarms.get(alarm_id)

    def alarm_word(self, chamber: str) -> int:
        """Bitmask of unresolved (ACTIVE or ACKED) alarm kinds for a chamber."""
        word = 0
        with self._lock:
            for (cham, kind), alarm_id in self._open.items():
                if cham == chamber and self._alarms[alarm_id].state != CLEARED:
                    word |= KIND_BITS[kind]
        return word

    # -- transitions ---------------------------------------------------

    def _notify(self, record: AlarmRecord, old_state: str | None) -> None:
        for listener in self._listeners:
            listener(record, old_state)

    def _raise(self, chamber: str, kind: str, now_ms: int, detail: str) -> AlarmRecord | None:
        key = (chamber, kind)
        with self._lock:
            if key in self._open:
                return None
            record = AlarmRecord(
                id=self._next_id, chamber=chamber, kind=kind,
                state=ACTIVE, raised_ts_ms=now_ms, detail=detail,
            )
            self._next_id += 1
            self._alarms[record.id] = record
            self._open[key] = record.id
        self._notify(record, None)
        return record

    def _transition(self, record: AlarmRecord, new_state: str) -> None:
        if (record.state, new_state) not in _LEGAL:
            raise TransitionError(f"alarm {record.id}: {record.state} -> {new_state}")
        old = record.state
        record.state = new_state
        if new_state == CLEARED:
            self._open.pop((record.chamber, record.kind), None)
        self._notify(record, old)

    def ack(self, alarm_id: int, by: str, now_ms: int | None = None) -> AlarmRecord:
        with self._lock:
            record = self._alarms.get(alarm_id)
            if record is None:
                raise KeyError(f"no alarm {alarm_id}")
            record.acked_by = by
            record.acked_ts_ms = now_ms if now_ms is not None else int(time.time() * 1000)
            self._transition(record, ACKED)
        return record

    def _clear(self, chamber: str, kind: str, now_ms: int) -> AlarmRecord | None:
        with self._lock:
            alarm_id = self._open.get((chamber, kind))
            if alarm_id is None:
                return None
            record = self._alarms[alarm_id]
            record.cleared_ts_ms = now_ms
            self._transition(record, CLEARED)
        return record

    def raise_event(self, chamber: str, kind: str, now_ms: int, detail: str) -> AlarmRecord | None:
        """Raise an event alarm (tuning_fail, unit_failover); None if already open."""
        if kind not in KINDS:
            raise ValueError(f"unknown alarm kind {kind!r}")
        return self._raise(chamber, kind, now_ms, detail)

    def clear_event(self, chamber: str, kind: str, now_ms: int) -> AlarmRecord | None:
        return self._clear(chamber, kind, now_ms)

    # -- condition evaluation -------------------------------------------

    def evaluate(self, now_ms: int, signals: ChamberSignals) -> list[AlarmRecord]:
        """Feed one sample; returns the records that changed state."""
        changed: list[AlarmRecord] = []
        cham = signals.chamber
        track = self._track.get(cham)
        if track is None:
            track = self._track[cham] = _ChamberTrack()

        def drive(kind: str, failing: bool, raise_dwell_s: float,
                  clear_dwell_s: float, detail: Callable[[], str]) -> None:
            # detail is a thunk: the message text only exists on the sample
            # that actually raises, not on the millions that stay healthy
            held = track.out[kind].update(failing, now_ms)
            healthy = track.back[kind].update(not failing, now_ms)
            if failing and held >= raise_dwell_s and (cham, kind) not in self._open:
                rec = self._raise(cham, kind, now_ms, detail())
                if rec is not None:
                    changed.append(rec)
            elif not failing and healthy >= clear_dwell_s and (cham, kind) in self._open:
                rec = self._clear(cham, kind, now_ms)
                if rec is not None:
                    changed.append(rec)

        t_err = signals.t_meas - signals.sp_t
        drive(
            KIND_DEVIATION_T,
            abs(t_err) > DEVIATION_TOL_T_C,
            DEVIATION_DWELL_S,
            DEVIATION_DWELL_S,
            lambda: f"T {signals.t_meas:.2f} C vs setpoint {signals.sp_t:.2f} C"
            f" (tolerance {DEVIATION_TOL_T_C:.1f} C for {DEVIATION_DWELL_S:.0f} s)",
        )

        rh_err = signals.rh_meas - signals.sp_rh
        drive(
            KIND_DEVIATION_RH,
            abs(rh_err) > DEVIATION_TOL_RH_PCT,
            DEVIATION_DWELL_S,
            DEVIATION_DWELL_S,
            lambda: f"RH {signals.rh_meas:.2f} % vs setpoint {signals.sp_rh:.2f} %"
            f" (tolerance {DEVIATION_TOL_RH_PCT:.1f} % for {DEVIATION_DWELL_S:.0f} s)",
        )

        drive(
            KIND_BLOWER_FAIL,
            signals.blower_on and signals.pressure_inwc < BLOWER_MIN_INWC,
            BLOWER_DWELL_S,
            BLOWER_DWELL_S,
            lambda: f"duct pressure {signals.pressure_inwc:.3f} inWC below"
            f" {BLOWER_MIN_INWC} inWC with blower commanded on",
        )

        stale = self._stale_sensors(track, signals, now_ms)
        drive(
            KIND_SENSOR_FAIL,
            bool(stale),
            0.0,
            0.0,
            lambda: "sensors " + ",".join(str(i) for i in sorted(stale)),
        )
        if stale:
            with self._lock:
                open_id = self._open.get((cham, KIND_SENSOR_FAIL))
                if open_id is not None:
                    rec = self._alarms[open_id]
                    detail = "sensors " + ",".join(str(i) for i in sorted(stale))
                    if rec.detail != detail and rec.state == ACTIVE:
                        rec.detail = detail

        return changed

    def _stale_sensors(self, track: _ChamberTrack, signals: ChamberSignals,
                       now_ms: int) -> set[int]:
        """Sensor ids currently considered failed (flagged bad or frozen)."""
        stale: set[int] = set(signals.bad_sensors)
        stale_ms = SENSOR_STALE_S * 1000.0
        for watches, values in (
            (track.watch_t, signals.sensor_t),
            (track.watch_rh, signals.sensor_rh),
        ):
            while len(watches) < len(values):
                watches.append(_SignalWatch())
            for idx, value in enumerate(values, start=1):
                watch = watches[idx - 1]
                # inlined _SignalWatch.stale_s: this runs for every sensor
                # of every sample and the call overhead was measurable
                if value != watch.last_value:
                    watch.last_value = value
                    watch.changed_ms = now_ms
                elif now_ms - watch.changed_ms >= stale_ms:
                    stale.add(idx)
        return stale


@dataclass
class OutboxNotifier:
    """Appends an email-shaped JSON line per raise and per clear.

    Plugs straight into :class:`AlarmEngine` as a listener. Write failures
    are logged and swallowed so notification trouble can never block or
    rewind an alarm transition.
    """

    path: Path
    recipient: str = "quality@chambertwin.example"
    clock: Callable[[], float] = time.time

    def __call__(self, record: AlarmRecord, old_state: str | None) -> None:
        if record.state not in (ACTIVE, CLEARED):
            return
        entry = {
            "to": self.recipient,
            "subject": f"[{record.state}] chamber {record.chamber}: {record.kind}",
            "body": record.detail,
            "alarm_id": record.id,
            "ts_ms": int(self.clock() * 1000),
        }
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as sink:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError as exc:
            log.warning("alarm outbox write failed: %s", exc)
