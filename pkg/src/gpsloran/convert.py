"""Merge parsed records into one timestamp-sorted timeline and export it.

The merged timeline orders records by (timestamp, GPS before Loran,
arrival order) - a deterministic total order, so identical inputs always
export byte-identical files.  GPS wins ties because it is the reference
truth an analysis reads first.

Export schemas (fixed column order, timestamps as ISO 8601 UTC with
milliseconds, floats in shortest round-trip form):

- ``timeline_gps``:   timestamp, lat_deg, lon_deg, alt_m, fix_quality,
  num_sats, hdop
- ``timeline_loran``: timestamp, gri, station_role, toa_us, snr_db, ecd_us
- ``timeline_all``:   timestamp, record_type, then the sparse union of
  the above

Two formats: ``columns`` (CSV) and ``lines`` (one JSON object per line).
A ``manifest.json`` records counts, time span, per-file digests, and the
list of gaps longer than the gap threshold.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from .fsutil import atomic_write_bytes, atomic_write_json, read_json, sha256_bytes
from .parse import GpsFix, LoranMeasurement
from .timeutil import iso_ms, parse_iso_ms

GPS_TYPE = "gps_fix"
LORAN_TYPE = "loran"

GPS_COLUMNS = ("timestamp", "lat_deg", "lon_deg", "alt_m", "fix_quality", "num_sats", "hdop")
LORAN_COLUMNS = ("timestamp", "gri", "station_role", "toa_us", "snr_db", "ecd_us")
ALL_COLUMNS = ("timestamp", "record_type") + GPS_COLUMNS[1:] + LORAN_COLUMNS[1:]

FORMAT_EXTENSIONS = {"columns": "csv", "lines": "jsonl"}

DEFAULT_GAP_THRESHOLD_S = 300.0

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class TimelineRecord:
    timestamp: datetime
    payload: GpsFix | LoranMeasurement
    arrival_index: int

    def __post_init__(self) -> None:
        if self.timestamp != self.payload.timestamp:
            raise ValueError("timeline timestamp must equal the payload timestamp")

    @property
    def record_type(self) -> str:
        return GPS_TYPE if isinstance(self.payload, GpsFix) else LORAN_TYPE


def merge_sort(gps: list[GpsFix], loran: list[LoranMeasurement]) -> list[TimelineRecord]:
    """Merge both record streams into one sorted timeline.

    Ties at equal timestamps break GPS-before-Loran, then by arrival
    order within each stream; the result is a stable total order.
    """
    records = [TimelineRecord(fix.timestamp, fix, index) for index, fix in enumerate(gps)]
    offset = len(records)
    records.extend(
        TimelineRecord(obs.timestamp, obs, offset + index) for index, obs in enumerate(loran)
    )
    return sorted(
        records,
        key=lambda r: (r.timestamp, 0 if r.record_type == GPS_TYPE else 1, r.arrival_index),
    )


# --- cell rendering ---------------------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, datetime):
        return iso_ms(value)
    return str(value)


def _gps_values(fix: GpsFix) -> dict:
    return {
        "timestamp": fix.timestamp,
        "lat_deg": fix.lat,
        "lon_deg": fix.lon,
        "alt_m": fix.alt_m,
        "fix_quality": fix.fix_quality,
        "num_sats": fix.num_sats,
        "hdop": fix.hdop,
    }


def _loran_values(obs: LoranMeasurement) -> dict:
    return {
        "timestamp": obs.timestamp,
        "gri": obs.gri,
        "station_role": obs.station_role,
        "toa_us": obs.toa_us,
        "snr_db": obs.snr_db,
        "ecd_us": obs.ecd_us,
    }


def _record_values(record: TimelineRecord) -> dict:
    if record.record_type == GPS_TYPE:
        return _gps_values(record.payload)
    return _loran_values(record.payload)


def _render_columns(rows: list[dict], columns: tuple[str, ...]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(name)) for name in columns])
    return buffer.getvalue().encode("utf-8")


def _render_lines(rows: list[dict], columns: tuple[str, ...], sparse: bool) -> bytes:
    buffer = io.StringIO()
    for row in rows:
        payload = {}
        for name in columns:
            if name not in row:
                continue
            value = row[name]
            if value is None and sparse:
                continue
            payload[name] = iso_ms(value) if isinstance(value, datetime) else value
        buffer.write(json.dumps(payload, separators=(",", ":")) + "\n")
    return buffer.getvalue().encode("utf-8")


# --- export -----------------------------------------------------------------


def export(
    timeline: list[TimelineRecord],
    formats: tuple[str, ...] | str,
    out_dir: Path,
    *,
    session_id: str = "",
    parse_errors: int = 0,
    quarantined: int = 0,
    gap_threshold_s: float = DEFAULT_GAP_THRESHOLD_S,
) -> dict:
    """Write timeline exports plus ``manifest.json`` into *out_dir*.

    Deterministic: the same timeline always produces byte-identical
    files.  On any write failure every file this call already produced
    is removed, so a directory never holds a partial export set.
    Returns the manifest payload.
    """
    if isinstance(formats, str):
        formats = (formats,)
    for fmt in formats:
        if fmt not in FORMAT_EXTENSIONS:
            raise ValueError(f"unknown export format: {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    gps_rows = [_gps_values(r.payload) for r in timeline if r.record_type == GPS_TYPE]
    loran_rows = [_loran_values(r.payload) for r in timeline if r.record_type == LORAN_TYPE]
    all_rows = [
        {"record_type": r.record_type, **_record_values(r)} for r in timeline
    ]

    written: list[Path] = []
    export_files: list[dict] = []
    try:
        for fmt in formats:
            extension = FORMAT_EXTENSIONS[fmt]
            plans = (
                (f"timeline_gps.{extension}", gps_rows, GPS_COLUMNS, False),
                (f"timeline_loran.{extension}", loran_rows, LORAN_COLUMNS, False),
                (f"timeline_all.{extension}", all_rows, ALL_COLUMNS, True),
            )
            for name, rows, columns, sparse in plans:
                if fmt == "columns":
                    content = _render_columns(rows, columns)
                else:
                    content = _render_lines(rows, columns, sparse)
                path = out_dir / name
                atomic_write_bytes(path, content)
                written.append(path)
                export_files.append(
                    {"path": name, "format": fmt, "digest": sha256_bytes(content)}
                )
    except OSError:
        for path in written:
            path.unlink(missing_ok=True)
        raise

    summary = summarize(timeline, gap_threshold_s)
    station_counts = {key: stats.count for key, stats in sorted(summary.stations.items())}
    manifest = {
        "session_id": session_id,
        "time_span": None
        if summary.time_span is None
        else {"first": iso_ms(summary.time_span[0]), "last": iso_ms(summary.time_span[1])},
        "record_counts": {
            "gps_fix": sum(1 for r in timeline if r.record_type == GPS_TYPE),
            "loran": len(loran_rows),
            "loran_by_station": station_counts,
            "parse_errors": parse_errors,
            "quarantined": quarantined,
        },
        "export_files": export_files,
        "gap_threshold_s": gap_threshold_s,
        "gap_list": [
            {"start": iso_ms(start), "end": iso_ms(end)} for start, end in summary.gaps
        ],
    }
    atomic_write_json(out_dir / MANIFEST_NAME, manifest)
    return manifest


# --- import readers ---------------------------------------------------------


def _optional_float(value) -> float | None:
    if value in (None, ""):
        return None
    return float(value)


def read_gps_export(path: Path) -> list[GpsFix]:
    """Read a ``timeline_gps`` export (either format) back into records."""
    fixes = []
    for row in _read_rows(Path(path)):
        fixes.append(
            GpsFix(
                timestamp=parse_iso_ms(row["timestamp"]),
                lat=_optional_float(row.get("lat_deg")),
                lon=_optional_float(row.get("lon_deg")),
                alt_m=_optional_float(row.get("alt_m")),
                fix_quality=int(row["fix_quality"]),
                num_sats=int(row["num_sats"]),
                hdop=_optional_float(row.get("hdop")),
            )
        )
    return fixes


def read_loran_export(path: Path) -> list[LoranMeasurement]:
    """Read a ``timeline_loran`` export (either format) back into records."""
    measurements = []
    for row in _read_rows(Path(path)):
        measurements.append(
            LoranMeasurement(
                timestamp=parse_iso_ms(row["timestamp"]),
                gri=int(row["gri"]),
                station_role=row["station_role"],
                toa_us=float(row["toa_us"]),
                snr_db=float(row["snr_db"]),
                ecd_us=float(row["ecd_us"]),
            )
        )
    return measurements


def _read_rows(path: Path) -> list[dict]:
    if path.suffix == ".jsonl":
        with open(path, "r", encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def read_manifest(out_dir: Path) -> dict:
    return read_json(Path(out_dir) / MANIFEST_NAME)


# --- summary statistics -----------------------------------------------------


@dataclass
class StationStats:
    count: int
    min_snr: float
    mean_snr: float
    max_snr: float


@dataclass
class SessionSummary:
    total_records: int
    gps_fix_count: int
    no_fix_count: int
    bbox: tuple[float, float, float, float] | None
    stations: dict[str, StationStats]
    time_span: tuple[datetime, datetime] | None
    gaps: list[tuple[datetime, datetime]]


def summarize(timeline: list[TimelineRecord], gap_threshold_s: float = DEFAULT_GAP_THRESHOLD_S) -> SessionSummary:
    """Per-station SNR stats, GPS fix count/bounding box (no-fix records
    excluded), overall time span, and gaps longer than the threshold."""
    lats, lons = [], []
    no_fix = 0
    snr_by_station: dict[str, list[float]] = {}
    for record in timeline:
        payload = record.payload
        if isinstance(payload, GpsFix):
            if payload.no_fix:
                no_fix += 1
            else:
                lats.append(payload.lat)
                lons.append(payload.lon)
        else:
            snr_by_station.setdefault(payload.station, []).append(payload.snr_db)

    gaps = []
    for earlier, later in zip(timeline, timeline[1:]):
        if (later.timestamp - earlier.timestamp).total_seconds() > gap_threshold_s:
            gaps.append((earlier.timestamp, later.timestamp))

    return SessionSummary(
        total_records=len(timeline),
        gps_fix_count=len(lats),
        no_fix_count=no_fix,
        bbox=(min(lats), max(lats), min(lons), max(lons)) if lats else None,
        stations={
            station: StationStats(
                count=len(values),
                min_snr=min(values),
                mean_snr=statistics.fmean(values),
                max_snr=max(values),
            )
            for station, values in sorted(snr_by_station.items())
        },
        time_span=(timeline[0].timestamp, timeline[-1].timestamp) if timeline else None,
        gaps=gaps,
    )
