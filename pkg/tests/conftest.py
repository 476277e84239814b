"""Shared builders for the test suite.

Sentence builders here compute checksums with an XOR fold written
independently of the package, so fixture data does not inherit bugs
from the code under test.
"""

from __future__ import annotations

import functools
import operator
from datetime import datetime

from gpsloran.timeutil import UTC


def xor_fold(body: bytes) -> int:
    return functools.reduce(operator.xor, body, 0)


def sentence(body: str) -> bytes:
    """$<body>*HH with an independently computed checksum."""
    payload = body.encode("ascii")
    return b"$" + payload + b"*%02X" % xor_fold(payload)


def gga_line(
    tod: str = "120000.000",
    lat: str = "3700.0000",
    ns: str = "N",
    lon: str = "12700.0000",
    ew: str = "E",
    quality: int = 1,
    sats: int = 8,
    hdop: str = "1.00",
    alt: str = "30.0",
) -> bytes:
    body = f"GPGGA,{tod},{lat},{ns},{lon},{ew},{quality},{sats:02d},{hdop},{alt},M,,M,,"
    return sentence(body)


def zda_line(moment: datetime) -> bytes:
    tod = moment.strftime("%H%M%S") + ".%03d" % (moment.microsecond // 1000)
    body = f"GPZDA,{tod},{moment.day:02d},{moment.month:02d},{moment.year:04d},00,00"
    return sentence(body)


def rmc_line(moment: datetime, lat: str = "3730.5000", ns: str = "N") -> bytes:
    tod = moment.strftime("%H%M%S") + ".%03d" % (moment.microsecond // 1000)
    ddmmyy = moment.strftime("%d%m%y")
    body = f"GPRMC,{tod},A,{lat},{ns},12311.1200,W,0.5,054.7,{ddmmyy},,"
    return sentence(body)


def plrm_line(
    tod: str = "120000.000",
    gri: int = 9930,
    role: str = "M",
    toa: str = "45678.9",
    snr: str = "12.0",
    ecd: str = "0.5",
) -> bytes:
    body = f"PLRM,{tod},{gri},{role},{toa},{snr},{ecd}"
    return sentence(body)


def utc(*args: int) -> datetime:
    return datetime(*args, tzinfo=UTC)


class ScriptedSource:
    """Byte source driven by a list of (advance_seconds, payload) steps.

    Each read advances the injected clock and returns the payload (b""
    models an idle poll).  An exhausted script raises SourceClosed, like
    a feed that went away.
    """

    def __init__(self, clock, steps):
        from gpsloran.record import SourceClosed

        self._closed_error = SourceClosed
        self.clock = clock
        self.steps = list(steps)

    def read(self, max_bytes: int, timeout: float) -> bytes:
        if not self.steps:
            raise self._closed_error("script exhausted")
        advance, data = self.steps.pop(0)
        if advance:
            self.clock.advance(advance)
        return data

    def close(self) -> None:
        pass


def crlf(*lines: bytes) -> bytes:
    return b"".join(line + b"\r\n" for line in lines)
