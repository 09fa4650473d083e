"""Durable time-series store with interval queries and report rendering.

Samples land in append-only JSONL segment files and are fsynced before the
ingest call returns, so an acked batch survives a hard process kill. On
start the store replays its segments to rebuild the in-memory index; a torn
final line (the one write a crash can interrupt) is truncated away since it
was never acked.

Queries downsample by picking, for each boundary from+k*interval, the first
stored sample with ts at or after the boundary. Boundaries whose window
holds no sample produce no row, and serial numbers are assigned after that
filtering, so they are always contiguous from 1.
"""
from __future__ import annotations

import bisect
import csv
import html
import io
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Callable, Iterable

from .telemetry import TelemetrySample, parse_iso_utc, parse_sample

SEGMENT_RECORDS = 50_000

REPORT_COLUMNS = ("Serial", "Formatted Time") + tuple(
    col for i in range(1, 8) for col in (f"T{i}", f"RH{i}")
)


class StoreCorrupt(Exception):
    """A segment is damaged somewhere other than its torn tail."""


class SampleStore:
    """Append-only segment log plus an in-memory (chamber, ts) index."""

    def __init__(self, root: str | Path, segment_records: int = SEGMENT_RECORDS) -> None:
        self._root = Path(root)
        self._root.mkdir(parents=True, exist_ok=True)
        self._segment_records = segment_records
        self._lock = threading.RLock()
        self._keys: set[tuple[str, str]] = set()
        self._series: dict[str, list[tuple[int, TelemetrySample]]] = {}
        self._listeners: list[Callable[[TelemetrySample], None]] = []
        self._active_path: Path | None = None
        self._active_count = 0
        self._sink_fh: BinaryIO | None = None  # open handle on the active segment
        self._replay()

    # -- storage ---------------------------------------------------------

    def _segments(self) -> list[Path]:
        return sorted(self._root.glob("seg-*.jsonl"))

    def _replay(self) -> None:
        segments = self._segments()
        for seg_index, path in enumerate(segments):
            raw = path.read_bytes()
            offset = 0
            count = 0
            while offset < len(raw):
                end = raw.find(b"\n", offset)
                last = end == -1 or end == len(raw) - 1
                line = raw[offset:] if end == -1 else raw[offset:end]
                try:
                    sample = parse_sample(line.decode("utf-8"))
                except (ValueError, UnicodeDecodeError) as exc:
                    if last and seg_index == len(segments) - 1:
                        with path.open("r+b") as fh:
                            fh.truncate(offset)
                        break
                    raise StoreCorrupt(f"{path.name}: {exc}") from exc
                self._index(sample)
                count += 1
                offset = len(raw) if end == -1 else end + 1
            self._active_path = path
            self._active_count = count

    def _index(self, sample: TelemetrySample) -> None:
        self._keys.add(sample.key)
        series = self._series.setdefault(sample.chamber, [])
        ts_ms = parse_iso_utc(sample.ts)
        bisect.insort(series, (ts_ms, sample), key=lambda pair: pair[0])

    def _sink(self) -> BinaryIO:
        if self._active_path is None or self._active_count >= self._segment_records:
            n = len(self._segments()) + 1
            self._active_path = self._root / f"seg-{n:06d}.jsonl"
            self._active_count = 0
            if self._sink_fh is not None:
                self._sink_fh.close()
                self._sink_fh = None
        if self._sink_fh is None or self._sink_fh.closed:
            self._sink_fh = self._active_path.open("ab")
        return self._sink_fh

    def close(self) -> None:
        with self._lock:
            if self._sink_fh is not None and not self._sink_fh.closed:
                self._sink_fh.close()

    def ingest(self, samples: Iterable[TelemetrySample | dict | bytes | str]) -> int:
        """Persists new samples; duplicates by (chamber, ts) are skipped.

        Returns how many were accepted. The data is on disk (fsync) before
        this returns, which is what lets the HTTP layer ack durably.
        """
        fresh: list[TelemetrySample] = []
        with self._lock:
            for item in samples:
                sample = item if isinstance(item, TelemetrySample) else parse_sample(item)
                if sample.key in self._keys or any(s.key == sample.key for s in fresh):
                    continue
                fresh.append(sample)
            pending = fresh
            while pending:
                sink = self._sink()
                room = self._segment_records - self._active_count
                chunk, pending = pending[:room], pending[room:]
                for sample in chunk:
                    sink.write(sample.canonical_json() + b"\n")
                sink.flush()
                os.fsync(sink.fileno())
                self._active_count += len(chunk)
                for sample in chunk:
                    self._index(sample)
        for sample in fresh:
            for listener in self._listeners:
                listener(sample)
        return len(fresh)

    def add_listener(self, listener: Callable[[TelemetrySample], None]) -> None:
        """Called once per accepted sample, after it is durable."""
        self._listeners.append(listener)

    # -- queries ----------------------------------------------------------

    def count(self, chamber: str | None = None) -> int:
        with self._lock:
            if chamber is not None:
                return len(self._series.get(chamber, ()))
            return sum(len(s) for s in self._series.values())

    def query_raw(self, chamber: str, from_ms: int, to_ms: int) -> list[TelemetrySample]:
        with self._lock:
            series = list(self._series.get(chamber, ()))
        lo = bisect.bisect_left(series, from_ms, key=lambda pair: pair[0])
        hi = bisect.bisect_left(series, to_ms, key=lambda pair: pair[0])
        return [sample for _, sample in series[lo:hi]]

    def query(
        self, chamber: str, from_ms: int, to_ms: int, interval_s: int
    ) -> list[TelemetrySample]:
        """One sample per interval boundary: the first at or after it."""
        if from_ms >= to_ms:
            return []
        if interval_s <= 0:
            raise ValueError("interval must be positive")
        with self._lock:
            series = list(self._series.get(chamber, ()))
        step = interval_s * 1000
        rows: list[TelemetrySample] = []
        boundary = from_ms
        while boundary < to_ms:
            idx = bisect.bisect_left(series, boundary, key=lambda pair: pair[0])
            if idx < len(series) and series[idx][0] < boundary + step:
                rows.append(series[idx][1])
            boundary += step
        return rows


# -- reports ---------------------------------------------------------------


def format_display_time(epoch_ms: int, tz: timezone = timezone.utc) -> str:
    """12-hour wall time without leading zeros, e.g. 5/2/2024 3:45:30 PM."""
    stamp = datetime.fromtimestamp(epoch_ms / 1000.0, tz=tz)
    hour = stamp.hour % 12 or 12
    half = "AM" if stamp.hour < 12 else "PM"
    return f"{stamp.month}/{stamp.day}/{stamp.year} {hour}:{stamp.minute:02d}:{stamp.second:02d} {half}"


def _interval_label(interval_s: int) -> str:
    if interval_s % 60 == 0:
        return f"{interval_s // 60} min"
    return f"{interval_s} s"


def report_title(from_ms: int, to_ms: int, interval_s: int, tz: timezone = timezone.utc) -> str:
    return (
        f"Data Report from {format_display_time(from_ms, tz)}"
        f" to {format_display_time(to_ms, tz)}"
        f" (Time Interval: {_interval_label(interval_s)})"
    )


def _report_rows(rows: list[TelemetrySample], tz: timezone) -> list[list[str]]:
    table = []
    for serial, sample in enumerate(rows, start=1):
        cells = [str(serial), format_display_time(parse_iso_utc(sample.ts), tz)]
        for sensor in sample.sensors:
            cells.append(f"{sensor.t_c:.2f}")
            cells.append(f"{sensor.rh_pct:.2f}")
        table.append(cells)
    return table


def render_report(
    store: SampleStore,
    chamber: str,
    from_ms: int,
    to_ms: int,
    interval_s: int,
    fmt: str = "csv",
    tz: timezone = timezone.utc,
) -> bytes:
    """Deterministic CSV or HTML report over a downsampled query."""
    rows = store.query(chamber, from_ms, to_ms, interval_s)
    title = report_title(from_ms, to_ms, interval_s, tz)
    if fmt == "csv":
        return _render_csv(title, chamber, _report_rows(rows, tz))
    if fmt == "html":
        return _render_html(title, chamber, _report_rows(rows, tz))
    raise ValueError(f"unknown report format {fmt!r}")


def _render_csv(title: str, chamber: str, table: list[list[str]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([title])
    writer.writerow([f"Chamber: {chamber}"])
    if not table:
        writer.writerow(["no data"])
        return buf.getvalue().encode("utf-8")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(table)
    return buf.getvalue().encode("utf-8")


def _render_html(title: str, chamber: str, table: list[list[str]]) -> bytes:
    parts = [
        "<!doctype html>\n<html><head><meta charset=\"utf-8\">",
        f"<title>{html.escape(title)}</title></head><body>",
        f"<h1>{html.escape(title)}</h1>",
        f"<p>Chamber: {html.escape(chamber)}</p>",
    ]
    if not table:
        parts.append("<p>no data</p></body></html>\n")
        return "".join(parts).encode("utf-8")
    parts.append("<table><thead><tr>")
    parts.extend(f"<th>{html.escape(col)}</th>" for col in REPORT_COLUMNS)
    parts.append("</tr></thead><tbody>")
    for cells in table:
        parts.append("<tr>")
        parts.extend(f"<td>{html.escape(cell)}</td>" for cell in cells)
        parts.append("</tr>")
    parts.append("</tbody></table></body></html>\n")
    return "".join(parts).encode("utf-8")
