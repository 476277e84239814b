"""Deterministic receiver simulator: synthetic GPS/Loran byte streams.

A :class:`Scenario` describes a capture period — GPS fix rate, Loran
stations with piecewise-linear SNR/TOA profiles, corruption rates — and
:func:`generate_stream` turns it into the exact byte stream an
integrated receiver would emit (interleaved GGA, ZDA, and ``$PLRM``
sentences) together with the ground-truth record list for every
uncorrupted sentence.  The same (scenario, seed) always yields identical
bytes and identical ground truth, which makes the simulator the oracle
for end-to-end pipeline tests.

All generated values are pre-snapped to the serialization grid (see the
quantize helpers in :mod:`gpsloran.parse`), so a pipeline that loses no
data reproduces the ground truth bit for bit.

Scenario files are JSON::

    {
      "seed": 42,
      "start": "2020-04-17T00:00:00Z",
      "duration_s": 86400,
      "gps_rate_hz": 1.0,
      "zda_period_s": 10.0,
      "position": {"lat": 37.0, "lon": 127.0, "alt_m": 30.0,
                   "noise_sigma_deg": 0.0001, "noise_sigma_alt_m": 0.5},
      "stations": [
        {"gri": 9930, "role": "M", "rate_hz": 0.1,
         "toa_profile": 45678.9,
         "snr_profile": [[0, 10.0], [43200, 18.0], [86400, 10.0]],
         "ecd_us": 1.2}
      ],
      "corruption": {"bad_checksum_rate": 0.0,
                     "garbage_line_rate": 0.0,
                     "truncation_rate": 0.0}
    }

Profiles are either a constant number or a list of ``[t_offset_s,
value]`` breakpoints, linearly interpolated and clamped at the ends.
"""
from __future__ import annotations

import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field as dataclass_field
from datetime import datetime, timedelta
from pathlib import Path

from .convert import export, merge_sort
from .fsutil import read_json
from .parse import (
    GpsFix,
    LoranMeasurement,
    quantize_coordinate,
    quantize_decimal,
    serialize,
    serialize_zda,
)
from .timeutil import UTC, parse_iso_ms

logger = logging.getLogger(__name__)

DEFAULT_START = datetime(2020, 4, 17, tzinfo=UTC)


@dataclass(frozen=True)
class PiecewiseLinear:
    """Piecewise-linear function of scenario time (seconds from start)."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("profile needs at least one point")
        times = [t for t, _ in self.points]
        if times != sorted(times):
            raise ValueError("profile breakpoints must be time-ordered")

    def sample(self, t: float) -> float:
        points = self.points
        if t <= points[0][0]:
            return points[0][1]
        if t >= points[-1][0]:
            return points[-1][1]
        for (t0, v0), (t1, v1) in zip(points, points[1:]):
            if t0 <= t <= t1:
                if t1 == t0:
                    return v1
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        return points[-1][1]

    @classmethod
    def coerce(cls, value) -> "PiecewiseLinear":
        if isinstance(value, PiecewiseLinear):
            return value
        if isinstance(value, (int, float)):
            return cls(((0.0, float(value)),))
        return cls(tuple((float(t), float(v)) for t, v in value))


@dataclass
class StationSpec:
    gri: int
    role: str
    rate_hz: float = 0.1
    toa_profile: PiecewiseLinear = PiecewiseLinear(((0.0, 45678.9),))
    snr_profile: PiecewiseLinear = PiecewiseLinear(((0.0, 12.0),))
    ecd_us: float = 0.0

    @property
    def station(self) -> str:
        return f"{self.gri}{self.role}"


@dataclass
class Corruption:
    bad_checksum_rate: float = 0.0
    garbage_line_rate: float = 0.0
    truncation_rate: float = 0.0

    def __post_init__(self) -> None:
        for name in ("bad_checksum_rate", "garbage_line_rate", "truncation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]: {rate}")
        if self.bad_checksum_rate + self.truncation_rate > 1.0:
            raise ValueError("bad_checksum_rate + truncation_rate must not exceed 1")


@dataclass
class Scenario:
    seed: int = 0
    start: datetime = DEFAULT_START
    duration_s: float = 60.0
    gps_rate_hz: float = 1.0
    zda_period_s: float = 10.0
    lat: float = 37.0
    lon: float = 127.0
    alt_m: float = 30.0
    noise_sigma_deg: float = 0.0001
    noise_sigma_alt_m: float = 0.5
    fix_quality: int = 1
    stations: list[StationSpec] = dataclass_field(default_factory=list)
    corruption: Corruption = dataclass_field(default_factory=Corruption)

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.gps_rate_hz <= 0:
            raise ValueError("gps_rate_hz must be positive")

    @classmethod
    def from_json(cls, payload: dict) -> "Scenario":
        position = payload.get("position", {})
        stations = [
            StationSpec(
                gri=int(item["gri"]),
                role=item["role"],
                rate_hz=float(item.get("rate_hz", 0.1)),
                toa_profile=PiecewiseLinear.coerce(item.get("toa_profile", 45678.9)),
                snr_profile=PiecewiseLinear.coerce(item.get("snr_profile", 12.0)),
                ecd_us=float(item.get("ecd_us", 0.0)),
            )
            for item in payload.get("stations", [])
        ]
        corruption = Corruption(**payload.get("corruption", {}))
        return cls(
            seed=int(payload.get("seed", 0)),
            start=parse_iso_ms(payload["start"]) if "start" in payload else DEFAULT_START,
            duration_s=float(payload.get("duration_s", 60.0)),
            gps_rate_hz=float(payload.get("gps_rate_hz", 1.0)),
            zda_period_s=float(payload.get("zda_period_s", 10.0)),
            lat=float(position.get("lat", 37.0)),
            lon=float(position.get("lon", 127.0)),
            alt_m=float(position.get("alt_m", 30.0)),
            noise_sigma_deg=float(position.get("noise_sigma_deg", 0.0001)),
            noise_sigma_alt_m=float(position.get("noise_sigma_alt_m", 0.5)),
            fix_quality=int(payload.get("fix_quality", 1)),
            stations=stations,
            corruption=corruption,
        )

    @classmethod
    def from_file(cls, path: Path) -> "Scenario":
        return cls.from_json(read_json(Path(path)))


@dataclass(frozen=True)
class TimedChunk:
    offset_s: float
    data: bytes


@dataclass
class SimStream:
    chunks: list[TimedChunk]

    def to_bytes(self) -> bytes:
        return b"".join(chunk.data for chunk in self.chunks)


@dataclass
class GroundTruth:
    gps: list[GpsFix]
    loran: list[LoranMeasurement]
    emitted_sentences: int = 0
    bad_checksum_lines: int = 0
    truncated_lines: int = 0
    garbage_lines: int = 0

    @property
    def corrupted_lines(self) -> int:
        return self.bad_checksum_lines + self.truncated_lines


# Event kinds in emission-priority order at equal timestamps: the date
# sentence leads, then the fix, then station observations in scenario
# order.
_ZDA, _GGA, _PLRM = 0, 1, 2


def _event_times(rate_hz: float, duration_ms: int) -> list[int]:
    times = []
    k = 0
    while True:
        t_ms = round(k * 1000.0 / rate_hz)
        if t_ms >= duration_ms:
            return times
        times.append(t_ms)
        k += 1


def _flip_checksum(line: bytes) -> bytes:
    star = line.rfind(b"*")
    value = int(line[star + 1 :], 16)
    return line[: star + 1] + f"{(value + 1) % 256:02X}".encode("ascii")


def _truncate(line: bytes) -> bytes:
    first = line.find(b",")
    second = line.find(b",", first + 1)
    return line[:second] if second != -1 else line[:first]


def generate_stream(scenario: Scenario) -> tuple[SimStream, GroundTruth]:
    """Build the receiver byte stream and its ground truth.

    Corrupted sentences (flipped checksum or truncation) and inserted
    garbage lines are counted but excluded from the ground truth; they
    must surface downstream only as quarantined lines or parse errors.
    """
    rng = random.Random(scenario.seed)
    duration_ms = round(scenario.duration_s * 1000)

    events: list[tuple[int, int, int]] = []
    if scenario.zda_period_s > 0:
        zda_ms = round(scenario.zda_period_s * 1000)
        events.extend((t, _ZDA, 0) for t in range(0, duration_ms, zda_ms))
    events.extend((t, _GGA, 0) for t in _event_times(scenario.gps_rate_hz, duration_ms))
    for index, station in enumerate(scenario.stations):
        events.extend(
            (t, _PLRM + index, index) for t in _event_times(station.rate_hz, duration_ms)
        )
    events.sort(key=lambda e: (e[0], e[1]))

    chunks: list[TimedChunk] = []
    truth = GroundTruth(gps=[], loran=[])
    rates = scenario.corruption

    for t_ms, kind, station_index in events:
        offset_s = t_ms / 1000.0
        moment = scenario.start + timedelta(milliseconds=t_ms)

        if rng.random() < rates.garbage_line_rate:
            garbage = f"#{rng.randrange(1 << 32):08x}".encode("ascii")
            chunks.append(TimedChunk(offset_s, garbage + b"\r\n"))
            truth.garbage_lines += 1

        record = None
        if kind == _ZDA:
            line = serialize_zda(moment)
        elif kind == _GGA:
            lat = quantize_coordinate(
                min(max(scenario.lat + rng.gauss(0.0, scenario.noise_sigma_deg), -90.0), 90.0),
                "lat",
            )
            lon = quantize_coordinate(
                min(max(scenario.lon + rng.gauss(0.0, scenario.noise_sigma_deg), -180.0), 180.0),
                "lon",
            )
            record = GpsFix(
                timestamp=moment,
                lat=lat,
                lon=lon,
                alt_m=quantize_decimal(
                    scenario.alt_m + rng.gauss(0.0, scenario.noise_sigma_alt_m), 1
                ),
                fix_quality=scenario.fix_quality,
                num_sats=rng.randint(6, 12),
                hdop=quantize_decimal(0.8 + 0.4 * rng.random(), 2),
            )
            line = serialize(record)
        else:
            station = scenario.stations[station_index]
            t_s = t_ms / 1000.0
            toa_cap = station.gri * 10 - 0.1
            record = LoranMeasurement(
                timestamp=moment,
                gri=station.gri,
                station_role=station.role,
                toa_us=quantize_decimal(
                    min(max(station.toa_profile.sample(t_s), 0.0), toa_cap), 1
                ),
                snr_db=quantize_decimal(station.snr_profile.sample(t_s), 1),
                ecd_us=quantize_decimal(station.ecd_us, 1),
            )
            line = serialize(record)

        truth.emitted_sentences += 1
        draw = rng.random()
        if draw < rates.bad_checksum_rate:
            line = _flip_checksum(line)
            truth.bad_checksum_lines += 1
            record = None
        elif draw < rates.bad_checksum_rate + rates.truncation_rate:
            line = _truncate(line)
            truth.truncated_lines += 1
            record = None

        if isinstance(record, GpsFix):
            truth.gps.append(record)
        elif isinstance(record, LoranMeasurement):
            truth.loran.append(record)
        chunks.append(TimedChunk(offset_s, line + b"\r\n"))

    return SimStream(chunks), truth


def write_ground_truth(
    truth: GroundTruth,
    out_dir: Path,
    formats: tuple[str, ...] | str = "columns",
    *,
    gap_threshold_s: float = 300.0,
) -> dict:
    """Export the ground truth with the same schema files a pipeline run
    produces, so the two can be compared record for record."""
    timeline = merge_sort(truth.gps, truth.loran)
    return export(
        timeline,
        formats,
        Path(out_dir),
        session_id="ground-truth",
        gap_threshold_s=gap_threshold_s,
    )


# --- serving ----------------------------------------------------------------


class SimServer:
    """Serves a generated stream to one TCP client at a time.

    Pacing modes: ``unpaced`` pushes as fast as the socket accepts;
    ``real-time`` spaces chunks by their scenario offsets; ``accelerated``
    divides those gaps by ``factor``.  The stream position survives a
    client disconnect, so a reconnecting client resumes where it left
    off; once the final chunk is sent the server closes and stops.
    """

    def __init__(
        self,
        stream: SimStream,
        host: str = "127.0.0.1",
        port: int = 0,
        pace: str = "unpaced",
        factor: float = 1.0,
    ):
        if pace not in ("unpaced", "real-time", "accelerated"):
            raise ValueError(f"unknown pacing mode: {pace!r}")
        if factor <= 0:
            raise ValueError("pacing factor must be positive")
        self._chunks = stream.chunks
        self._pace = pace
        self._factor = factor if pace == "accelerated" else 1.0
        self._position = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.host, self.port = self._listener.getsockname()[:2]

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "SimServer":
        self._thread = threading.Thread(target=self._run, name="sim-server", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        self._listener.settimeout(0.1)
        try:
            while not self._stop.is_set() and self._position < len(self._chunks):
                try:
                    conn, peer = self._listener.accept()
                except TimeoutError:
                    continue
                except OSError:
                    break
                logger.info("client connected: %s:%s", *peer[:2])
                with conn:
                    self._feed(conn)
                if self._position < len(self._chunks):
                    logger.info("client left at chunk %d; awaiting reconnect", self._position)
        finally:
            self._listener.close()

    def _feed(self, conn: socket.socket) -> None:
        anchor_wall = time.monotonic()
        anchor_offset = self._chunks[self._position].offset_s
        for index in range(self._position, len(self._chunks)):
            if self._stop.is_set():
                return
            chunk = self._chunks[index]
            if self._pace != "unpaced":
                target = anchor_wall + (chunk.offset_s - anchor_offset) / self._factor
                delay = target - time.monotonic()
                if delay > 0.002:
                    time.sleep(delay)
            try:
                conn.sendall(chunk.data)
            except OSError:
                return
            self._position = index + 1

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def stop(self) -> None:
        self._stop.set()
        self.join(timeout=2.0)
        self._listener.close()

    @property
    def complete(self) -> bool:
        return self._position >= len(self._chunks)


def serve(
    stream: SimStream,
    host: str = "127.0.0.1",
    port: int = 0,
    pace: str = "unpaced",
    factor: float = 1.0,
) -> SimServer:
    """Bind and start serving *stream*; returns the running server."""
    return SimServer(stream, host=host, port=port, pace=pace, factor=factor).start()
