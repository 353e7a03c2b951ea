"""Parse raw timestamped location records into pair-aligned per-day traces.

Cleaning rules applied here:
  - coordinates outside legal ranges reject the row (never clamped)
  - all day bucketing uses local time = utc timestamp + per-row tz offset
  - duplicate timestamps for one device keep the first occurrence
  - a day survives only if both members of the pair have data and a label
  - disagreeing self-reports resolve to a negative label
No interpolation anywhere: emitted samples are a subset of the input rows.
"""

from __future__ import annotations

import csv
import datetime
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

from trajmatch.errors import IngestError

MS_PER_DAY = 86_400_000
MS_PER_MINUTE = 60_000
_EPOCH_ORDINAL = datetime.date(1970, 1, 1).toordinal()


@dataclass(frozen=True)
class LocationSample:
    device_id: str
    timestamp_utc: int  # epoch milliseconds
    tz_offset_minutes: int
    lat: float
    lon: float

    @property
    def local_ms(self) -> int:
        return self.timestamp_utc + self.tz_offset_minutes * MS_PER_MINUTE

    @property
    def local_date(self) -> datetime.date:
        return datetime.date.fromordinal(_EPOCH_ORDINAL + self.local_ms // MS_PER_DAY)

    @property
    def ms_of_day(self) -> int:
        return self.local_ms % MS_PER_DAY


@dataclass(frozen=True)
class DayTrace:
    device_id: str
    local_date: datetime.date
    samples: tuple[LocationSample, ...]  # strictly increasing local time


@dataclass(frozen=True)
class PairDay:
    pair_id: str
    local_date: datetime.date
    trace_a: DayTrace
    trace_b: DayTrace
    label: Optional[bool]


@dataclass
class ColumnMap:
    device: str = "device_id"
    timestamp: str = "timestamp"
    lat: str = "lat"
    lon: str = "lon"
    tz_offset: str = "tz_offset_minutes"  # optional column


@dataclass
class ParseReport:
    rows_total: int = 0
    rows_ok: int = 0
    skipped: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def skip(self, reason: str) -> None:
        self.skipped[reason] = self.skipped.get(reason, 0) + 1

    @property
    def rows_skipped(self) -> int:
        return sum(self.skipped.values())


@dataclass
class ParseResult:
    samples: list[LocationSample]
    report: ParseReport


def _parse_timestamp_ms(raw: str) -> int:
    """Accept epoch milliseconds or ISO-8601; returns epoch ms (UTC)."""
    text = raw.strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return int(text)
    except ValueError:
        pass
    iso = text.replace("Z", "+00:00")
    dt = datetime.datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=datetime.timezone.utc)
    return int(dt.timestamp() * 1000)


def parse_locations(
    stream: TextIO | str,
    columns: ColumnMap | None = None,
    delimiter: str = ",",
) -> ParseResult:
    """Parse delimiter-separated location rows with a header.

    Invalid rows (bad coordinates, unparseable timestamps, wrong field
    count) are skipped and tallied in the report; a missing required header
    column is fatal.
    """
    columns = columns or ColumnMap()
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("empty input: no header row")
    header = [h.strip() for h in header]
    required = [columns.device, columns.timestamp, columns.lat, columns.lon]
    for name in required:
        if name not in header:
            raise IngestError(f"malformed header: missing column {name!r} in {header}")
    idx = {name: header.index(name) for name in required}
    has_tz = columns.tz_offset in header
    tz_idx = header.index(columns.tz_offset) if has_tz else -1

    report = ParseReport()
    if not has_tz:
        report.warnings.append(
            f"no {columns.tz_offset!r} column: assuming tz offset 0 (timestamps treated as local)"
        )
    samples: list[LocationSample] = []
    for row in reader:
        report.rows_total += 1
        if len(row) != len(header):
            report.skip("wrong_field_count")
            continue
        try:
            ts = _parse_timestamp_ms(row[idx[columns.timestamp]])
        except (ValueError, OverflowError):
            report.skip("bad_timestamp")
            continue
        try:
            lat = float(row[idx[columns.lat]])
            lon = float(row[idx[columns.lon]])
        except ValueError:
            report.skip("bad_coordinate")
            continue
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            report.skip("coordinate_out_of_range")
            continue
        tz_off = 0
        if has_tz:
            try:
                tz_off = int(row[tz_idx])
            except ValueError:
                report.skip("bad_tz_offset")
                continue
        device = row[idx[columns.device]].strip()
        if not device:
            report.skip("empty_device_id")
            continue
        samples.append(LocationSample(device, ts, tz_off, lat, lon))
        report.rows_ok += 1
    return ParseResult(samples, report)


def read_roster(stream: TextIO | str, delimiter: str = ",") -> dict[str, str]:
    """Read device_id,pair_id rows; every pair must have exactly two devices."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    header = [h.strip() for h in next(reader, [])]
    if header[:2] != ["device_id", "pair_id"]:
        raise IngestError(f"malformed roster header: {header}")
    roster: dict[str, str] = {}
    for row in reader:
        if len(row) < 2:
            raise IngestError(f"malformed roster row: {row}")
        device, pair = row[0].strip(), row[1].strip()
        if device in roster:
            raise IngestError(f"device {device!r} appears twice in roster")
        roster[device] = pair
    counts: dict[str, int] = {}
    for pair in roster.values():
        counts[pair] = counts.get(pair, 0) + 1
    bad = {p: n for p, n in counts.items() if n != 2}
    if bad:
        raise IngestError(f"pairs without exactly two devices: {bad}")
    return roster


_TRUE = {"1", "true", "yes", "y"}
_FALSE = {"0", "false", "no", "n"}


def _parse_bool(raw: str) -> bool:
    text = raw.strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise IngestError(f"unparseable boolean report {raw!r}")


def read_labels(
    stream: TextIO | str, delimiter: str = ","
) -> dict[tuple[str, datetime.date], tuple[bool, bool]]:
    """Read pair_id,local_date,report_a,report_b; duplicate (pair, date) is fatal."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    header = [h.strip() for h in next(reader, [])]
    if header[:4] != ["pair_id", "local_date", "report_a", "report_b"]:
        raise IngestError(f"malformed label header: {header}")
    labels: dict[tuple[str, datetime.date], tuple[bool, bool]] = {}
    for row in reader:
        if len(row) < 4:
            raise IngestError(f"malformed label row: {row}")
        pair = row[0].strip()
        day = datetime.date.fromisoformat(row[1].strip())
        key = (pair, day)
        if key in labels:
            raise IngestError(f"duplicate label row for {pair} {day}")
        labels[key] = (_parse_bool(row[2]), _parse_bool(row[3]))
    return labels


def build_pair_days(
    samples: Iterable[LocationSample],
    roster: dict[str, str],
    labels: dict[tuple[str, datetime.date], tuple[bool, bool]],
) -> list[PairDay]:
    """Group samples into labeled PairDays.

    Days where either member has no data are dropped for both; days without
    a label row are dropped; disagreeing self-reports become label False.
    Within a pair the lexicographically smaller device id is trace_a.
    """
    by_device_day: dict[tuple[str, datetime.date], list[LocationSample]] = {}
    for s in samples:
        if s.device_id not in roster:
            raise IngestError(f"device {s.device_id!r} absent from roster")
        by_device_day.setdefault((s.device_id, s.local_date), []).append(s)

    pair_devices: dict[str, list[str]] = {}
    for device, pair in roster.items():
        pair_devices.setdefault(pair, []).append(device)
    for pair in pair_devices:
        pair_devices[pair].sort()

    def day_trace(device: str, day: datetime.date) -> DayTrace | None:
        rows = by_device_day.get((device, day))
        if not rows:
            return None
        rows = sorted(rows, key=lambda s: s.local_ms)
        dedup: list[LocationSample] = []
        seen: set[int] = set()
        for s in rows:  # keep first occurrence of duplicate timestamps
            if s.local_ms in seen:
                continue
            seen.add(s.local_ms)
            dedup.append(s)
        return DayTrace(device, day, tuple(dedup))

    out: list[PairDay] = []
    for pair in sorted(pair_devices):
        dev_a, dev_b = pair_devices[pair]
        days = {d for (dev, d) in by_device_day if dev in (dev_a, dev_b)}
        for day in sorted(days):
            trace_a = day_trace(dev_a, day)
            trace_b = day_trace(dev_b, day)
            if trace_a is None or trace_b is None:
                continue  # symmetric removal
            reports = labels.get((pair, day))
            if reports is None:
                continue
            out.append(PairDay(pair, day, trace_a, trace_b, reports[0] and reports[1]))
    return out


# --- canonical line-delimited record format -------------------------------

def pair_day_to_record(pd: PairDay) -> dict:
    def trace_rec(t: DayTrace) -> dict:
        return {
            "device_id": t.device_id,
            "samples": [
                [s.timestamp_utc, s.tz_offset_minutes, s.lat, s.lon] for s in t.samples
            ],
        }

    return {
        "record": "pair_day",
        "pair_id": pd.pair_id,
        "local_date": pd.local_date.isoformat(),
        "label": pd.label,
        "trace_a": trace_rec(pd.trace_a),
        "trace_b": trace_rec(pd.trace_b),
    }


def pair_day_from_record(rec: dict) -> PairDay:
    day = datetime.date.fromisoformat(rec["local_date"])

    def trace(tr: dict) -> DayTrace:
        samples = tuple(
            LocationSample(tr["device_id"], int(ts), int(tz), float(lat), float(lon))
            for ts, tz, lat, lon in tr["samples"]
        )
        return DayTrace(tr["device_id"], day, samples)

    return PairDay(
        rec["pair_id"], day, trace(rec["trace_a"]), trace(rec["trace_b"]), rec["label"]
    )


def write_pair_days(path, pair_days: Iterable[PairDay], provenance: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"record": "provenance", **provenance}, sort_keys=True) + "\n")
        for pd in pair_days:
            fh.write(json.dumps(pair_day_to_record(pd), sort_keys=True) + "\n")


def read_pair_days(path) -> list[PairDay]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "pair_day":
                out.append(pair_day_from_record(rec))
    return out
