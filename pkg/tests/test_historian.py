"""Sample store durability, downsampling, and report rendering."""
from __future__ import annotations

import re
import signal
import subprocess
import sys
import textwrap
from pathlib import Path

import pytest

from chambertwin.historian import (
    REPORT_COLUMNS,
    SampleStore,
    StoreCorrupt,
    format_display_time,
    render_report,
    report_title,
)
from chambertwin.telemetry import (
    SensorValue,
    TelemetryError,
    TelemetrySample,
    iso_utc,
    parse_iso_utc,
)

T0_MS = parse_iso_utc("2024-05-02T15:30:00Z")


def make_sample(chamber="A", ts_ms=T0_MS, t1=39.74, rh1=76.14):
    sensors = tuple(
        SensorValue(i, round(t1 + 0.01 * (i - 1), 2), round(rh1 - 0.01 * (i - 1), 2))
        for i in range(1, 8)
    )
    return TelemetrySample(
        ts=iso_utc(ts_ms), chamber=chamber, sensors=sensors,
        pressure_inwc=0.25, sp_t_c=40.0, sp_rh_pct=75.0,
        heater_duty=0.31, cool_duty=0.0, steam_current_a=8.4,
        alarm_word=0,
    )


def fill(store, n, chamber="A", period_ms=300_000, start_ms=T0_MS):
    batch = [
        make_sample(chamber, start_ms + k * period_ms, t1=39.0 + (k % 10) * 0.1)
        for k in range(n)
    ]
    return store.ingest(batch)


# ------------------------------------------------------------------- ingest

def test_ingest_is_idempotent(tmp_path):
    store = SampleStore(tmp_path)
    batch = [make_sample(ts_ms=T0_MS + k * 5000) for k in range(10)]
    assert store.ingest(batch) == 10
    assert store.ingest(batch) == 0
    assert store.count("A") == 10


def test_duplicates_inside_one_batch_collapse(tmp_path):
    store = SampleStore(tmp_path)
    sample = make_sample()
    assert store.ingest([sample, sample, sample]) == 1


def test_same_ts_different_chambers_is_fine(tmp_path):
    store = SampleStore(tmp_path)
    assert store.ingest([make_sample("A"), make_sample("B")]) == 2


def test_malformed_sample_names_the_problem(tmp_path):
    store = SampleStore(tmp_path)
    doc = make_sample().to_dict()
    doc["sensors"] = doc["sensors"][:6]
    with pytest.raises(TelemetryError, match="7 sensors"):
        store.ingest([doc])
    doc = make_sample().to_dict()
    del doc["duties"]["steam_a"]
    with pytest.raises(TelemetryError, match="steam_a"):
        store.ingest([doc])


def test_listener_fires_once_per_accepted_sample(tmp_path):
    store = SampleStore(tmp_path)
    seen = []
    store.add_listener(seen.append)
    sample = make_sample()
    store.ingest([sample])
    store.ingest([sample])
    assert len(seen) == 1


# --------------------------------------------------------------- durability

def test_store_replays_after_reopen(tmp_path):
    fill(SampleStore(tmp_path), 100)
    reopened = SampleStore(tmp_path)
    assert reopened.count("A") == 100
    rows = reopened.query_raw("A", T0_MS, T0_MS + 100 * 300_000)
    assert len(rows) == 100
    assert rows[0].ts == iso_utc(T0_MS)


def test_segments_roll_and_replay(tmp_path):
    store = SampleStore(tmp_path, segment_records=10)
    fill(store, 25)
    assert len(list(tmp_path.glob("seg-*.jsonl"))) == 3
    assert SampleStore(tmp_path).count("A") == 25


def test_torn_tail_is_truncated_not_fatal(tmp_path):
    store = SampleStore(tmp_path)
    fill(store, 5)
    seg = next(tmp_path.glob("seg-*.jsonl"))
    with seg.open("ab") as fh:
        fh.write(b'{"chamber":"A","ts":"2024-05-0')  # torn mid-write
    reopened = SampleStore(tmp_path)
    assert reopened.count("A") == 5
    # the partial line is gone so later appends stay parseable
    fill(reopened, 3, start_ms=T0_MS + 10**7)
    assert SampleStore(tmp_path).count("A") == 8


def test_mid_file_corruption_refuses_to_load(tmp_path):
    fill(SampleStore(tmp_path), 5)
    seg = next(tmp_path.glob("seg-*.jsonl"))
    lines = seg.read_bytes().splitlines(keepends=True)
    lines[2] = b"garbage not json\n"
    seg.write_bytes(b"".join(lines))
    with pytest.raises(StoreCorrupt):
        SampleStore(tmp_path)


def test_acked_ingests_survive_sigkill(tmp_path):
    """Hard-kill a writer mid-run; everything it acked must be queryable."""
    child_src = textwrap.dedent("""
        import sys
        from chambertwin.historian import SampleStore
        sys.path.insert(0, sys.argv[2])
        from test_historian import make_sample, T0_MS
        store = SampleStore(sys.argv[1])
        for k in range(1000):
            store.ingest([make_sample(ts_ms=T0_MS + k * 5000)])
            print(k, flush=True)
    """)
    proc = subprocess.Popen(
        [sys.executable, "-c", child_src, str(tmp_path), str(Path(__file__).parent)],
        stdout=subprocess.PIPE, text=True,
    )
    acked = 0
    for line in proc.stdout:
        acked = int(line) + 1
        if acked >= 200:
            proc.send_signal(signal.SIGKILL)
            break
    proc.wait()
    assert acked >= 200
    store = SampleStore(tmp_path)
    assert store.count("A") >= acked
    have = {s.ts for s in store.query_raw("A", T0_MS, T0_MS + 10**9)}
    for k in range(acked):
        assert iso_utc(T0_MS + k * 5000) in have


# ------------------------------------------------------------------ queries

def test_downsample_picks_first_at_or_after_boundary(tmp_path):
    store = SampleStore(tmp_path)
    fill(store, 24 * 12, period_ms=300_000)  # 5-min samples for 24 h
    rows = store.query("A", T0_MS, T0_MS + 24 * 3600_000, 3600)
    assert len(rows) == 24
    assert rows[0].ts == iso_utc(T0_MS)
    assert rows[1].ts == iso_utc(T0_MS + 3600_000)


def test_downsample_offset_start(tmp_path):
    store = SampleStore(tmp_path)
    # samples sit 930 s past each boundary
    for k in range(4):
        store.ingest([make_sample(ts_ms=T0_MS + k * 3600_000 + 930_000)])
    rows = store.query("A", T0_MS, T0_MS + 4 * 3600_000, 3600)
    assert [s.ts for s in rows] == [iso_utc(T0_MS + k * 3600_000 + 930_000) for k in range(4)]


def test_gap_boundaries_are_omitted(tmp_path):
    store = SampleStore(tmp_path)
    keep = [k for k in range(24) if k not in (5, 6, 7)]
    for k in keep:
        store.ingest([make_sample(ts_ms=T0_MS + k * 3600_000)])
    rows = store.query("A", T0_MS, T0_MS + 24 * 3600_000, 3600)
    assert len(rows) == 21
    hours = [(parse_iso_utc(s.ts) - T0_MS) // 3600_000 for s in rows]
    assert hours == keep


def test_sample_beyond_window_does_not_backfill(tmp_path):
    store = SampleStore(tmp_path)
    store.ingest([make_sample(ts_ms=T0_MS + 5400_000)])  # 1.5 h in
    rows = store.query("A", T0_MS, T0_MS + 2 * 3600_000, 3600)
    assert len(rows) == 1
    assert rows[0].ts == iso_utc(T0_MS + 5400_000)  # boundary 1, not boundary 0


def test_query_validation(tmp_path):
    store = SampleStore(tmp_path)
    assert store.query("A", T0_MS, T0_MS, 3600) == []
    with pytest.raises(ValueError):
        store.query("A", T0_MS, T0_MS + 1, 0)


# ------------------------------------------------------------------ reports

def test_display_time_is_twelve_hour_without_leading_zeros():
    assert format_display_time(parse_iso_utc("2024-05-02T15:45:30Z")) == "5/2/2024 3:45:30 PM"
    assert format_display_time(parse_iso_utc("2024-05-02T00:00:00Z")) == "5/2/2024 12:00:00 AM"
    assert format_display_time(parse_iso_utc("2024-05-02T12:00:00Z")) == "5/2/2024 12:00:00 PM"
    assert format_display_time(parse_iso_utc("2024-12-31T09:05:07Z")) == "12/31/2024 9:05:07 AM"


def test_report_title_carries_interval_in_minutes():
    title = report_title(T0_MS, T0_MS + 24 * 3600_000, 3600)
    assert title == (
        "Data Report from 5/2/2024 3:30:00 PM to 5/3/2024 3:30:00 PM"
        " (Time Interval: 60 min)"
    )


def _hourly_fixture(tmp_path):
    store = SampleStore(tmp_path)
    for k in range(24):
        store.ingest([
            make_sample(ts_ms=T0_MS + 930_000 + k * 3600_000,
                        t1=round(39.74 + 0.01 * (k % 3), 2),
                        rh1=round(76.14 - 0.02 * (k % 5), 2))
        ])
    return store


def test_report_first_row_matches_observed_values(tmp_path):
    store = _hourly_fixture(tmp_path)
    doc = render_report(store, "A", T0_MS, T0_MS + 24 * 3600_000, 3600, "csv")
    lines = doc.decode().splitlines()
    assert lines[2] == ",".join(REPORT_COLUMNS)
    first = lines[3].split(",")
    assert first[0] == "1"
    assert first[1] == "5/2/2024 3:45:30 PM"
    assert first[2] == "39.74"
    assert first[3] == "76.14"
    assert len(first) == 16


def test_report_column_set_is_exact():
    assert REPORT_COLUMNS == (
        "Serial", "Formatted Time",
        "T1", "RH1", "T2", "RH2", "T3", "RH3", "T4", "RH4",
        "T5", "RH5", "T6", "RH6", "T7", "RH7",
    )


def test_report_bytes_are_deterministic(tmp_path):
    store = _hourly_fixture(tmp_path)
    args = (store, "A", T0_MS, T0_MS + 24 * 3600_000, 3600)
    assert render_report(*args, "csv") == render_report(*args, "csv")
    assert render_report(*args, "html") == render_report(*args, "html")


def test_html_and_csv_agree_on_every_cell(tmp_path):
    store = _hourly_fixture(tmp_path)
    args = (store, "A", T0_MS, T0_MS + 24 * 3600_000, 3600)
    csv_rows = [
        line.split(",") for line in render_report(*args, "csv").decode().splitlines()[3:]
    ]
    html_doc = render_report(*args, "html").decode()
    html_rows = [
        re.findall(r"<td>(.*?)</td>", row)
        for row in re.findall(r"<tr>(.*?)</tr>", html_doc)[1:]
    ]
    assert html_rows == csv_rows


def test_empty_report_says_no_data(tmp_path):
    store = SampleStore(tmp_path)
    for fmt in ("csv", "html"):
        doc = render_report(store, "A", T0_MS, T0_MS + 3600_000, 3600, fmt)
        assert b"no data" in doc


def test_serials_stay_contiguous_across_gaps(tmp_path):
    store = SampleStore(tmp_path)
    for k in (0, 1, 9, 10):
        store.ingest([make_sample(ts_ms=T0_MS + k * 3600_000)])
    doc = render_report(store, "A", T0_MS, T0_MS + 12 * 3600_000, 3600, "csv")
    serials = [line.split(",")[0] for line in doc.decode().splitlines()[3:]]
    assert serials == ["1", "2", "3", "4"]


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        render_report(SampleStore(tmp_path), "A", T0_MS, T0_MS + 1, 3600, "pdf")
