"""Lossless capture of a receiver byte stream into rotating segment files.

The recorder's one job is to get every byte onto disk exactly as it
arrived: no decoding, no line framing, no filtering.  Interpretation
belongs to later stages, which only ever read closed segments.

A capture session is a directory::

    <out_dir>/<session_id>/
        session.json          static session metadata (source, policy)
        events.jsonl          append-only segment open/close + gap events
        raw_<stamp>.log       verbatim byte segments, one per rotation

Rotation closes the active segment at a policy boundary (UTC midnight by
default) and opens a new one; the boundary always falls between appended
chunks, so no chunk is ever split.  Appended bytes are flushed and
fsynced at least every ``flush_interval`` seconds, which bounds how much
a crash can lose.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import select
import socket
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Protocol

from .clock import Clock, SystemClock
from .fsutil import atomic_write_json
from .timeutil import basic_stamp, ensure_utc, iso_ms, next_utc_midnight

# Pacing base for file replay: a classic 4800-baud NMEA feed moves about
# 480 bytes per second (10 bits per byte on the wire).  replay_speed
# multiplies this; 0 means unpaced.
REPLAY_BYTES_PER_SECOND = 480.0


class SourceClosed(Exception):
    """The source hit EOF or dropped the connection."""


class SourceUnavailable(Exception):
    """The source could not be opened within the retry budget."""


class SourceKind(str, Enum):
    SERIAL = "serial"
    TCP = "tcp"
    REPLAY = "replay"


@dataclass(frozen=True)
class SourceEndpoint:
    """Where bytes come from: a device path, host:port, or file to replay."""

    kind: SourceKind
    address: str
    replay_speed: float = 1.0

    def __post_init__(self) -> None:
        if not self.address:
            raise ValueError("source address must be non-empty")
        if self.kind is SourceKind.TCP and ":" not in self.address:
            raise ValueError(f"tcp address must be host:port, got {self.address!r}")
        if self.replay_speed < 0:
            raise ValueError("replay_speed must be >= 0")

    @classmethod
    def from_text(cls, text: str, replay_speed: float = 1.0) -> "SourceEndpoint":
        """Parse ``kind:address``, e.g. ``tcp:localhost:4001`` or
        ``replay:/data/raw.log``."""
        kind_text, _, address = text.partition(":")
        try:
            kind = SourceKind(kind_text)
        except ValueError:
            raise ValueError(f"unknown source kind in {text!r}") from None
        return cls(kind=kind, address=address, replay_speed=replay_speed)


@dataclass(frozen=True)
class RotationPolicy:
    """When to close the active segment: UTC-midnight-aligned (default)
    or a fixed interval from session start."""

    mode: str = "utc-midnight"
    interval_s: float = 86400.0

    def __post_init__(self) -> None:
        if self.mode not in ("utc-midnight", "fixed-interval"):
            raise ValueError(f"unknown rotation mode: {self.mode!r}")
        if self.interval_s <= 0:
            raise ValueError("rotation interval must be positive")

    def next_boundary(self, now: datetime, session_start: datetime) -> datetime:
        """First boundary strictly after *now*.

        A timestamp exactly on a boundary maps to the following one, so a
        segment opened on a boundary spans a full period.
        """
        now = ensure_utc(now)
        if self.mode == "utc-midnight":
            return next_utc_midnight(now)
        start = ensure_utc(session_start)
        elapsed = (now - start).total_seconds()
        periods = int(elapsed // self.interval_s) + 1
        boundary = start + timedelta(seconds=periods * self.interval_s)
        if boundary <= now:
            boundary += timedelta(seconds=self.interval_s)
        return boundary

    def to_json(self) -> dict:
        return {"mode": self.mode, "interval_s": self.interval_s}


@dataclass
class RawSegment:
    """One closed (or active) capture file."""

    path: Path
    session_id: str
    open_time: datetime
    close_time: datetime | None = None
    byte_count: int = 0
    digest: str | None = None

    @property
    def name(self) -> str:
        return self.path.name


# --- byte sources -----------------------------------------------------------


class ByteSource(Protocol):
    def read(self, max_bytes: int, timeout: float) -> bytes:
        """Return up to *max_bytes*; b"" on timeout; raise SourceClosed on EOF."""
        ...

    def close(self) -> None: ...


class TcpSource:
    def __init__(self, address: str, connect_timeout: float = 5.0):
        host, _, port = address.rpartition(":")
        self._sock = socket.create_connection((host, int(port)), timeout=connect_timeout)

    def read(self, max_bytes: int, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        try:
            data = self._sock.recv(max_bytes)
        except TimeoutError:
            return b""
        except OSError as exc:
            raise SourceClosed(f"connection lost: {exc}") from None
        if not data:
            raise SourceClosed("connection closed by peer")
        return data

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class SerialSource:
    """Reads a serial-style character device (or FIFO) as raw bytes."""

    def __init__(self, address: str):
        self._fd = os.open(address, os.O_RDONLY | os.O_NONBLOCK)

    def read(self, max_bytes: int, timeout: float) -> bytes:
        ready, _, _ = select.select([self._fd], [], [], timeout)
        if not ready:
            return b""
        try:
            data = os.read(self._fd, max_bytes)
        except BlockingIOError:
            return b""
        if not data:
            raise SourceClosed("device closed")
        return data

    def close(self) -> None:
        try:
            os.close(self._fd)
        except OSError:
            pass


class FileReplaySource:
    """Replays a previously captured file, paced like a live feed.

    replay_speed multiplies the nominal NMEA feed rate
    (:data:`REPLAY_BYTES_PER_SECOND`); 0 replays as fast as possible.
    """

    def __init__(self, address: str, replay_speed: float = 1.0, clock: Clock | None = None):
        self._handle = open(address, "rb")
        self._speed = replay_speed
        self._clock = clock or SystemClock()
        self._started: datetime | None = None
        self._sent = 0

    def read(self, max_bytes: int, timeout: float) -> bytes:
        if self._speed == 0:
            data = self._handle.read(max_bytes)
            if not data:
                raise SourceClosed("end of replay file")
            return data
        now = self._clock.now()
        if self._started is None:
            self._started = now
        rate = REPLAY_BYTES_PER_SECOND * self._speed
        budget = int((now - self._started).total_seconds() * rate) - self._sent
        if budget < 1:
            self._clock.sleep(min(timeout, max(1.0 / rate, 0.001)))
            return b""
        data = self._handle.read(min(max_bytes, budget))
        if not data:
            raise SourceClosed("end of replay file")
        self._sent += len(data)
        return data

    def close(self) -> None:
        self._handle.close()


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for opening (and reopening) a source."""

    max_attempts: int = 5
    initial_delay_s: float = 0.5
    max_delay_s: float = 30.0

    def delays(self):
        delay = self.initial_delay_s
        for _ in range(max(self.max_attempts - 1, 0)):
            yield delay
            delay = min(delay * 2, self.max_delay_s)


def open_source(
    endpoint: SourceEndpoint,
    clock: Clock | None = None,
    retry: RetryPolicy = RetryPolicy(),
) -> ByteSource:
    """Open the endpoint's byte source, retrying with backoff before
    declaring it unavailable."""
    clock = clock or SystemClock()
    last_error: Exception | None = None
    delays = retry.delays()
    for attempt in range(max(retry.max_attempts, 1)):
        try:
            if endpoint.kind is SourceKind.TCP:
                return TcpSource(endpoint.address)
            if endpoint.kind is SourceKind.SERIAL:
                return SerialSource(endpoint.address)
            return FileReplaySource(endpoint.address, endpoint.replay_speed, clock)
        except OSError as exc:
            last_error = exc
            delay = next(delays, None)
            if delay is not None:
                clock.sleep(delay)
    raise SourceUnavailable(
        f"cannot open {endpoint.kind.value} source {endpoint.address!r}: {last_error}"
    )


# --- capture session --------------------------------------------------------


class CaptureSession:
    """Single-writer capture into a session directory.

    Exactly one loop appends; rotation happens between appends.  Closed
    segments are immutable and safe for concurrent readers.
    """

    def __init__(
        self,
        out_dir: Path,
        *,
        session_id: str | None = None,
        source_text: str = "",
        rotation: RotationPolicy | None = None,
        flush_interval: float = 1.0,
        clock: Clock | None = None,
        extra_config: dict | None = None,
    ):
        self.clock = clock or SystemClock()
        self.rotation = rotation or RotationPolicy()
        self.flush_interval = flush_interval
        now = self.clock.now()
        self.session_id = session_id or f"session_{basic_stamp(now)}"
        self.dir = Path(out_dir) / self.session_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.session_start = now
        self.segments: list[RawSegment] = []
        metadata = {
            "session_id": self.session_id,
            "source": source_text,
            "rotation": self.rotation.to_json(),
            "flush_interval_s": flush_interval,
            "start_time": iso_ms(now),
        }
        if extra_config:
            metadata.update(extra_config)
        atomic_write_json(self.dir / "session.json", metadata)
        self._handle = None
        self.active = self._open_segment(now)
        self.next_boundary = self.rotation.next_boundary(now, self.session_start)

    # -- segment lifecycle

    def _open_segment(self, now: datetime) -> RawSegment:
        stem = f"raw_{basic_stamp(now)}"
        path = self.dir / f"{stem}.log"
        bump = 1
        while path.exists():
            bump += 1
            path = self.dir / f"{stem}_{bump}.log"
        segment = RawSegment(path=path, session_id=self.session_id, open_time=now)
        self._handle = open(path, "wb")
        self._hasher = hashlib.sha256()
        self._last_flush = now
        self._append_event({"event": "segment_open", "segment": path.name, "open_time": iso_ms(now)})
        return segment

    def append(self, chunk: bytes) -> None:
        """Append *chunk* verbatim to the active segment (never split)."""
        if self._handle is None:
            raise RuntimeError("session is closed")
        self._handle.write(chunk)
        self._hasher.update(chunk)
        self.active.byte_count += len(chunk)
        self.maybe_flush()

    def maybe_flush(self) -> None:
        """Flush+fsync if flush_interval has elapsed; callers tick this
        even when idle so the durability bound holds without traffic."""
        now = self.clock.now()
        if (now - self._last_flush).total_seconds() >= self.flush_interval:
            self._handle.flush()
            os.fsync(self._handle.fileno())
            self._last_flush = now

    def due_rotation(self, now: datetime | None = None) -> bool:
        return (now or self.clock.now()) >= self.next_boundary

    def rotate(self) -> RawSegment:
        """Close the active segment at the current boundary and open the
        next one.  Returns the closed, immutable segment."""
        boundary = self.next_boundary
        closed = self._close_active(boundary=boundary)
        now = self.clock.now()
        self.active = self._open_segment(now)
        self.next_boundary = self.rotation.next_boundary(now, self.session_start)
        return closed

    def close(self) -> RawSegment:
        """Close the session, returning the final segment."""
        closed = self._close_active(boundary=None)
        self._handle = None
        return closed

    def _close_active(self, boundary: datetime | None) -> RawSegment:
        self._handle.flush()
        os.fsync(self._handle.fileno())
        self._handle.close()
        segment = self.active
        segment.close_time = self.clock.now()
        segment.digest = self._hasher.hexdigest()
        event = {
            "event": "segment_closed",
            "segment": segment.name,
            "open_time": iso_ms(segment.open_time),
            "close_time": iso_ms(segment.close_time),
            "byte_count": segment.byte_count,
            "digest": segment.digest,
        }
        if boundary is not None:
            event["boundary"] = iso_ms(boundary)
        try:
            self._append_event(event)
        except OSError as exc:
            # A metadata failure must not abort rotation; note it and go on.
            logging.getLogger(__name__).error(
                "digest-pending: could not record close of %s: %s", segment.name, exc
            )
        self.segments.append(segment)
        return segment

    def record_gap(self, start: datetime, end: datetime, reason: str) -> None:
        self._append_event(
            {"event": "gap", "start": iso_ms(start), "end": iso_ms(end), "reason": reason}
        )

    def _append_event(self, payload: dict) -> None:
        line = json.dumps(payload, sort_keys=True) + "\n"
        with open(self.dir / "events.jsonl", "ab") as handle:
            handle.write(line.encode("utf-8"))
            handle.flush()
            os.fsync(handle.fileno())


def open_session(
    source: SourceEndpoint,
    out_dir: Path,
    rotation: RotationPolicy | None = None,
    **kwargs,
) -> CaptureSession:
    """Start a capture session directory for *source* under *out_dir*."""
    return CaptureSession(
        out_dir,
        source_text=f"{source.kind.value}:{source.address}",
        rotation=rotation,
        **kwargs,
    )


def read_events(session_dir: Path) -> list[dict]:
    """Load the session's event log; tolerates a torn final line."""
    path = Path(session_dir) / "events.jsonl"
    events = []
    if not path.exists():
        return events
    with open(path, "rb") as handle:
        for raw in handle:
            try:
                events.append(json.loads(raw.decode("utf-8")))
            except (ValueError, UnicodeDecodeError):
                break
    return events
