"""Unattended pipeline: capture continuously, process each closed segment.

One capture loop appends bytes to the active raw segment.  At every
rotation boundary the segment closes and a processing pass (classify ->
parse -> convert) runs on it — asynchronously on a small worker pool, so
a slow or failing conversion can never stall capture.  Stage handoff is
purely through the filesystem:

    <out_dir>/<session_id>/
        session.json                      static capture + pipeline config
        events.jsonl                      segment open/close + gap events
        state.json                        per-segment stage, for recovery
        raw_<stamp>.log                   closed segments (plus the active one)
        classified/<stem>/                route() outputs + report.json
        exports/<stem>/                   timeline exports + manifest.json
                                          + parse_errors.jsonl

``state.json`` is rewritten after every stage transition, and stage
outputs are built in a temp directory and renamed into place, so after a
crash each segment is either cleanly at its recorded stage boundary or
has leftovers that recovery discards.  ``recover()`` reprocesses every
segment stuck before ``converted`` from its last completed stage;
processing is deterministic, so reprocessing is byte-identical.

Scheduling consults an injectable clock, which makes day-scale rotation
testable in milliseconds.
"""
from __future__ import annotations

import json
import logging
import os
import re
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable

from . import classify as classify_mod
from .classify import ClassificationReport, route
from .clock import AcceleratedClock, Clock, SystemClock
from .convert import export, merge_sort
from .fsutil import atomic_write_bytes, atomic_write_json, read_json, sha256_file
from .parse import parse_classified
from .record import (
    CaptureSession,
    RetryPolicy,
    RotationPolicy,
    SourceClosed,
    SourceEndpoint,
    SourceKind,
    SourceUnavailable,
    open_source,
    read_events,
)
from .timeutil import UTC, parse_duration, parse_iso_ms

logger = logging.getLogger(__name__)

RECORDED = "recorded"
CLASSIFIED = "classified"
CONVERTED = "converted"

STATE_NAME = "state.json"

READ_CHUNK = 1 << 16
READ_TIMEOUT_S = 0.05

_STEM_STAMP_RE = re.compile(r"raw_(\d{8}T\d{6})Z")


class SimulatedCrash(BaseException):
    """Raised by test hooks to kill the pipeline at a chosen point.

    Derives from BaseException so ordinary per-segment error handling
    (which contains Exception) cannot swallow it — it takes the whole
    process down, exactly like a real crash.
    """


class Hooks:
    """Named instrumentation points the pipeline fires as it runs.

    Tests register callbacks that count invocations and raise (e.g.
    :class:`SimulatedCrash`) at a chosen occurrence.  Production runs use
    the default empty registry, which makes fire() a no-op.
    """

    def __init__(self) -> None:
        self._handlers: dict[str, list[Callable[[int], None]]] = {}
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def on(self, point: str, handler: Callable[[int], None]) -> None:
        self._handlers.setdefault(point, []).append(handler)

    def fire(self, point: str) -> None:
        with self._lock:
            count = self._counts.get(point, 0) + 1
            self._counts[point] = count
        for handler in self._handlers.get(point, ()):
            handler(count)


@dataclass
class SegmentEntry:
    name: str
    stage: str
    flagged: bool = False
    error: str | None = None


class StateStore:
    """Owns ``state.json``: the ordered list of segments and their stages.

    Every mutation rewrites the file atomically, so the on-disk state
    always reflects the last completed transition.
    """

    def __init__(self, path: Path, session_id: str):
        self.path = Path(path)
        self.session_id = session_id
        self.entries: list[SegmentEntry] = []
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: Path) -> "StateStore":
        payload = read_json(path)
        store = cls(path, payload["session_id"])
        store.entries = [
            SegmentEntry(
                name=item["name"],
                stage=item["stage"],
                flagged=item.get("flagged", False),
                error=item.get("error"),
            )
            for item in payload["segments"]
        ]
        return store

    def save(self) -> None:
        payload = {
            "session_id": self.session_id,
            "segments": [
                {"name": e.name, "stage": e.stage, "flagged": e.flagged, "error": e.error}
                for e in self.entries
            ],
        }
        atomic_write_json(self.path, payload)

    def add_segment(self, name: str, stage: str = RECORDED) -> None:
        with self._lock:
            if all(entry.name != name for entry in self.entries):
                self.entries.append(SegmentEntry(name=name, stage=stage))
            self.save()

    def set_stage(self, name: str, stage: str) -> None:
        with self._lock:
            entry = self._find(name)
            entry.stage = stage
            entry.flagged = False
            entry.error = None
            self.save()

    def flag(self, name: str, error: str) -> None:
        with self._lock:
            entry = self._find(name)
            entry.flagged = True
            entry.error = error
            self.save()

    def _find(self, name: str) -> SegmentEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(f"unknown segment {name!r}")


# --- configuration ----------------------------------------------------------

PIPELINE_DEFAULTS = {
    "formats": ["columns"],
    "gap_threshold_s": 300.0,
    "quarantine_invalid": True,
    "flush_interval_s": 1.0,
    "on_eof": "reconnect",
    "inline_processing": False,
    "max_workers": 2,
    "replay_speed": 1.0,
    "process_segments": True,
}


def pipeline_settings(config: dict) -> dict:
    settings = dict(PIPELINE_DEFAULTS)
    settings.update({k: v for k, v in config.items() if k in PIPELINE_DEFAULTS})
    return settings


def rotation_from_config(config: dict) -> RotationPolicy:
    rotation = config.get("rotation")
    if rotation is None:
        return RotationPolicy()
    if isinstance(rotation, str):
        if rotation == "utc-midnight":
            return RotationPolicy()
        return RotationPolicy(mode="fixed-interval", interval_s=parse_duration(rotation))
    return RotationPolicy(
        mode=rotation.get("mode", "utc-midnight"),
        interval_s=float(rotation.get("interval_s", 86400.0)),
    )


def clock_from_config(config: dict) -> Clock:
    spec = config.get("clock")
    if not spec or spec.get("kind", "system") == "system":
        return SystemClock()
    if spec["kind"] == "accelerated":
        return AcceleratedClock(
            start=parse_iso_ms(spec["start"]), factor=float(spec.get("factor", 1.0))
        )
    raise ValueError(f"unknown clock kind: {spec['kind']!r}")


def retry_from_config(config: dict) -> RetryPolicy:
    spec = config.get("retry") or {}
    return RetryPolicy(
        max_attempts=int(spec.get("max_attempts", 5)),
        initial_delay_s=float(spec.get("initial_delay_s", 0.5)),
        max_delay_s=float(spec.get("max_delay_s", 30.0)),
    )


# --- per-segment processing -------------------------------------------------


def segment_open_time(segment_name: str) -> datetime | None:
    """UTC instant embedded in a segment file name.  Seeds the date
    context of last resort for segments whose stream carried no date,
    and anchors the midnight-rollover window so lines buffered from just
    before a rotation keep their true date."""
    match = _STEM_STAMP_RE.match(segment_name)
    if not match:
        return None
    return datetime.strptime(match.group(1), "%Y%m%dT%H%M%S").replace(tzinfo=UTC)


def write_parse_errors(path: Path, issues) -> None:
    """Write one JSON object per skipped line, in input order."""
    lines = "".join(
        json.dumps(
            {
                "source_file": issue.source_file,
                "line_number": issue.line_number,
                "field": issue.field_name,
                "message": issue.message,
                "raw": issue.raw,
            },
            sort_keys=True,
        )
        + "\n"
        for issue in issues
    )
    atomic_write_bytes(path, lines.encode("utf-8"))


def process_segment(
    session_dir: Path,
    segment_name: str,
    settings: dict,
    state: StateStore,
    hooks: Hooks,
    *,
    start_stage: str = RECORDED,
) -> None:
    """Run classify -> parse -> convert for one closed segment.

    Stage outputs land in a temp directory that is renamed into place
    just before the state transition is persisted, so a crash at any
    point leaves either the old stage boundary or the new one — never a
    half-visible directory.
    """
    session_dir = Path(session_dir)
    stem = Path(segment_name).stem
    classified_dir = session_dir / "classified" / stem
    exports_dir = session_dir / "exports" / stem

    if start_stage == RECORDED or not classified_dir.exists():
        tmp = session_dir / "classified" / f".tmp-{stem}"
        if tmp.exists():
            shutil.rmtree(tmp)
        route(
            session_dir / segment_name,
            tmp,
            quarantine_invalid=settings["quarantine_invalid"],
        )
        hooks.fire("mid-classify")
        if classified_dir.exists():
            shutil.rmtree(classified_dir)
        os.replace(tmp, classified_dir)
        state.set_stage(segment_name, CLASSIFIED)

    report = ClassificationReport.from_json(read_json(classified_dir / classify_mod.REPORT_NAME))
    parsed = parse_classified(classified_dir, open_time=segment_open_time(segment_name))
    hooks.fire("mid-parse")
    timeline = merge_sort(parsed.gps, parsed.loran)

    tmp = session_dir / "exports" / f".tmp-{stem}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write_parse_errors(tmp / "parse_errors.jsonl", parsed.errors)
    export(
        timeline,
        tuple(settings["formats"]),
        tmp,
        session_id=state.session_id,
        parse_errors=len(parsed.errors),
        quarantined=report.quarantined_lines,
        gap_threshold_s=settings["gap_threshold_s"],
    )
    hooks.fire("mid-convert")
    if exports_dir.exists():
        shutil.rmtree(exports_dir)
    os.replace(tmp, exports_dir)
    state.set_stage(segment_name, CONVERTED)
    logger.info(
        "segment=%s stage=converted records=%d errors=%d quarantined=%d",
        segment_name,
        len(timeline),
        len(parsed.errors),
        report.quarantined_lines,
    )


# --- the long-running pipeline ----------------------------------------------


def run_pipeline(
    config: dict,
    *,
    clock: Clock | None = None,
    source=None,
    hooks: Hooks | None = None,
) -> int:
    """Capture continuously, processing each closed segment, until the
    source ends (or fails fatally).  Returns the process exit code:
    0 success, 1 fatal capture/config error, 2 some segments flagged.
    """
    hooks = hooks or Hooks()
    settings = pipeline_settings(config)
    clock = clock or clock_from_config(config)
    rotation = rotation_from_config(config)
    retry = retry_from_config(config)

    endpoint: SourceEndpoint | None = None
    if source is None:
        endpoint = SourceEndpoint.from_text(
            config["source"], replay_speed=float(settings["replay_speed"])
        )
        try:
            source = open_source(endpoint, clock, retry)
        except SourceUnavailable as exc:
            logger.error("startup failed: %s", exc)
            return 1

    session = CaptureSession(
        Path(config["out_dir"]),
        session_id=config.get("session_id"),
        source_text=config.get("source", "injected"),
        rotation=rotation,
        flush_interval=float(settings["flush_interval_s"]),
        clock=clock,
        extra_config={"pipeline": {k: settings[k] for k in (
            "formats", "gap_threshold_s", "quarantine_invalid", "flush_interval_s"
        )}},
    )
    state = StateStore(session.dir / STATE_NAME, session.session_id)
    state.save()
    logger.info("session=%s dir=%s", session.session_id, session.dir)

    executor: ThreadPoolExecutor | None = None
    if settings["process_segments"] and not settings["inline_processing"]:
        executor = ThreadPoolExecutor(max_workers=int(settings["max_workers"]))

    def safe_process(name: str) -> None:
        try:
            process_segment(session.dir, name, settings, state, hooks)
        except Exception as exc:
            logger.error("segment=%s processing failed: %s", name, exc)
            state.flag(name, str(exc))

    def submit(name: str) -> None:
        if not settings["process_segments"]:
            return
        if executor is None:
            safe_process(name)
        else:
            executor.submit(safe_process, name)

    fatal = False
    stop_on_eof = (
        settings["on_eof"] == "stop"
        or endpoint is None  # injected sources cannot be reopened
        or endpoint.kind is SourceKind.REPLAY
    )
    try:
        while True:
            now = clock.now()
            while session.due_rotation(now):
                closed = session.rotate()
                state.add_segment(closed.name, RECORDED)
                hooks.fire("post-rotation")
                submit(closed.name)
                now = clock.now()
            try:
                chunk = source.read(READ_CHUNK, READ_TIMEOUT_S)
            except SourceClosed as exc:
                if stop_on_eof:
                    logger.info("source ended: %s", exc)
                    break
                drop_time = clock.now()
                logger.warning("source dropped (%s); reconnecting", exc)
                source.close()
                try:
                    source = open_source(endpoint, clock, retry)
                except SourceUnavailable as retry_exc:
                    logger.error("reconnect failed: %s", retry_exc)
                    session.record_gap(drop_time, clock.now(), f"lost source: {retry_exc}")
                    fatal = True
                    break
                session.record_gap(drop_time, clock.now(), "reconnected after drop")
                continue
            if chunk:
                session.append(chunk)
                hooks.fire("mid-capture")
            else:
                session.maybe_flush()
    except OSError as exc:
        logger.error("fatal capture error: %s", exc)
        fatal = True

    final_segment = session.close()
    state.add_segment(final_segment.name, RECORDED)
    submit(final_segment.name)
    source.close()
    if executor is not None:
        executor.shutdown(wait=True)

    if fatal:
        return 1
    if settings["process_segments"] and any(
        e.stage != CONVERTED or e.flagged for e in state.entries
    ):
        return 2
    return 0


# --- crash recovery ---------------------------------------------------------


def _finalize_orphan(session_dir: Path, name: str, events: list[dict]) -> None:
    """Close the books on a segment whose writer died: take the flushed
    bytes on disk as its content and record a synthetic close event."""
    path = session_dir / name
    open_time = None
    for event in events:
        if event.get("event") == "segment_open" and event.get("segment") == name:
            open_time = event.get("open_time")
    payload = {
        "event": "segment_closed",
        "segment": name,
        "byte_count": path.stat().st_size,
        "digest": sha256_file(path),
        "recovered": True,
    }
    if open_time:
        payload["open_time"] = open_time
    line = json.dumps(payload, sort_keys=True) + "\n"
    with open(session_dir / "events.jsonl", "ab") as handle:
        handle.write(line.encode("utf-8"))


def recover(session_dir: Path, *, hooks: Hooks | None = None) -> int:
    """Bring every segment of an interrupted session to ``converted``.

    Re-runs each stuck segment from its last completed stage; since
    processing is deterministic, the reprocessed outputs are
    byte-identical to what an uninterrupted run would have produced from
    the same raw bytes.  A corrupt or missing state file is never
    resumed silently: the diagnostic lists the raw segments so they can
    be reprocessed by hand.
    """
    hooks = hooks or Hooks()
    session_dir = Path(session_dir)
    raw_names = sorted(p.name for p in session_dir.glob("raw_*.log"))
    try:
        state = StateStore.load(session_dir / STATE_NAME)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        logger.error(
            "cannot resume: state file unreadable (%s); recoverable segments: %s",
            exc,
            ", ".join(raw_names) or "none",
        )
        return 1

    try:
        session_meta = read_json(session_dir / "session.json")
    except (OSError, ValueError):
        session_meta = {}
    settings = pipeline_settings(session_meta.get("pipeline", {}))

    events = read_events(session_dir)
    known = {entry.name for entry in state.entries}
    for name in raw_names:
        if name not in known:
            logger.info("segment=%s finalizing interrupted capture", name)
            _finalize_orphan(session_dir, name, events)
            state.add_segment(name, RECORDED)

    for stray in list(session_dir.glob("classified/.tmp-*")) + list(
        session_dir.glob("exports/.tmp-*")
    ):
        shutil.rmtree(stray)

    failures = 0
    for entry in list(state.entries):
        if entry.stage == CONVERTED and not entry.flagged:
            continue
        start_stage = CLASSIFIED if entry.stage in (CLASSIFIED, CONVERTED) else RECORDED
        logger.info("segment=%s reprocessing from stage=%s", entry.name, entry.stage)
        try:
            process_segment(
                session_dir, entry.name, settings, state, hooks, start_stage=start_stage
            )
        except Exception as exc:
            logger.error("segment=%s recovery failed: %s", entry.name, exc)
            state.flag(entry.name, str(exc))
            failures += 1
    return 2 if failures else 0
