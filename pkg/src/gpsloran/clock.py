"""Injectable time sources.

Long-running capture code never calls ``datetime.now`` or ``time.sleep``
directly; it goes through a :class:`Clock` so tests (and accelerated
simulation runs) can substitute their own notion of time.
"""
from __future__ import annotations

import time
from datetime import datetime, timedelta
from typing import Protocol

from .timeutil import UTC, ensure_utc


class Clock(Protocol):
    def now(self) -> datetime:
        """Current time as an aware UTC datetime."""
        ...

    def sleep(self, seconds: float) -> None:
        """Block for *seconds* of this clock's time."""
        ...


class SystemClock:
    """Wall-clock time."""

    def now(self) -> datetime:
        return datetime.now(tz=UTC)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class AcceleratedClock:
    """Clock that runs at a fixed multiple of wall time from an anchor point.

    ``now()`` reports ``start + factor * (wall elapsed since construction)``,
    and ``sleep(s)`` blocks for ``s / factor`` wall seconds.  With
    ``factor=86400`` a simulated day passes in one wall second.
    """

    def __init__(self, start: datetime, factor: float = 1.0):
        if factor <= 0:
            raise ValueError("factor must be positive")
        self.start = ensure_utc(start)
        self.factor = float(factor)
        self._anchor = time.monotonic()

    def now(self) -> datetime:
        elapsed = time.monotonic() - self._anchor
        return self.start + timedelta(seconds=elapsed * self.factor)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds / self.factor)


class ManualClock:
    """Clock that only moves when told to; for deterministic tests.

    ``sleep`` advances the clock by the requested amount so code that waits
    in a loop still makes progress.
    """

    def __init__(self, start: datetime):
        self._now = ensure_utc(start)

    def now(self) -> datetime:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)

    def advance(self, seconds: float) -> None:
        self._now += timedelta(seconds=seconds)

    def set(self, moment: datetime) -> None:
        self._now = ensure_utc(moment)
