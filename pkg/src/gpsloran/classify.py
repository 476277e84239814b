"""Frame captured bytes into lines and sort them by message header.

Receiver output is a line-oriented byte stream.  Each line is classified
from its header alone:

- NMEA standard:     ``$`` + 5 uppercase letters, then ``,``/``*``/end.
  The first two letters are the talker id, the next three the sentence id
  (``$GPGGA`` -> talker ``GP``, sentence ``GGA``).
- NMEA proprietary:  ``$P`` + 1 or more uppercase alphanumerics, then
  ``,``/``*``/end.  The characters after ``$P`` are the vendor tag
  (``$PLRM`` -> tag ``LRM``).  NMEA reserves the ``P`` talker initial for
  proprietary sentences, so this rule is checked first; a line such as
  ``$PGRMZ`` is proprietary (tag ``GRMZ``), not standard talker ``PG``.
- unknown:           everything else.

Classification is total: any byte string gets exactly one class.  Content
is never decoded as text; framing and matching are byte-level.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterator

from .fsutil import atomic_write_json

# NMEA 0183 caps sentences at 82 characters; this generous bound tolerates
# long proprietary extensions while keeping per-line memory bounded.
MAX_LINE_BYTES = 8192

QUARANTINE_LABEL = "quarantine"

_PROPRIETARY_RE = re.compile(rb"^\$P([A-Z0-9]+)(?:[,*]|\Z)")
_STANDARD_RE = re.compile(rb"^\$([A-Z]{2})([A-Z]{3})(?:[,*]|\Z)")
_HEX_DIGITS = frozenset(b"0123456789abcdefABCDEF")


class MessageKind(str, Enum):
    STANDARD = "nmea-standard"
    PROPRIETARY = "nmea-proprietary"
    UNKNOWN = "unknown"


class ChecksumStatus(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    ABSENT = "absent"


@dataclass(frozen=True)
class MessageClass:
    kind: MessageKind
    talker: str | None = None
    sentence: str | None = None
    vendor_tag: str | None = None

    @property
    def label(self) -> str:
        """File-name-safe class label: ``GPGGA``, ``P_LRM``, or ``unknown``."""
        if self.kind is MessageKind.STANDARD:
            return f"{self.talker}{self.sentence}"
        if self.kind is MessageKind.PROPRIETARY:
            return f"P_{self.vendor_tag}"
        return "unknown"


UNKNOWN_CLASS = MessageClass(MessageKind.UNKNOWN)


@dataclass(frozen=True)
class ClassifiedLine:
    """One framed line together with everything route() decides from it."""

    raw: bytes
    message_class: MessageClass
    checksum_status: ChecksumStatus
    segment_offset: int
    line_number: int
    terminated: bool = True


def _frame(buffer: bytes) -> tuple[list[tuple[bytes, int]], bytes]:
    """Split *buffer* on LF into (line, consumed-byte-span) pairs.

    The span counts the terminator (and any stripped CR) so callers can
    track byte offsets; the returned residual is everything after the last
    LF.
    """
    parts = buffer.split(b"\n")
    residual = parts.pop()
    framed = []
    for part in parts:
        span = len(part) + 1
        if part.endswith(b"\r"):
            part = part[:-1]
        framed.append((part, span))
    return framed, residual


def extract_lines(data: bytes, carry: bytes = b"") -> tuple[list[bytes], bytes]:
    """Frame *data* (prefixed by leftover *carry*) into terminator-free lines.

    Splits on LF and strips one optional preceding CR.  Bytes after the
    final LF come back as the new carry, so feeding a stream through this
    in chunks of any size yields the same lines as one big call.  Empty
    lines are kept as zero-length entries.
    """
    framed, residual = _frame(carry + data)
    return [line for line, _ in framed], residual


def classify_line(line: bytes) -> MessageClass:
    """Classify one line by its header.  Total: never raises."""
    match = _PROPRIETARY_RE.match(line)
    if match:
        return MessageClass(MessageKind.PROPRIETARY, vendor_tag=match.group(1).decode("ascii"))
    match = _STANDARD_RE.match(line)
    if match:
        return MessageClass(
            MessageKind.STANDARD,
            talker=match.group(1).decode("ascii"),
            sentence=match.group(2).decode("ascii"),
        )
    return UNKNOWN_CLASS


def verify_checksum(line: bytes) -> ChecksumStatus:
    """Check the trailing ``*hh`` checksum field of an NMEA-style line.

    The checksum is the XOR of all bytes strictly between ``$`` and the
    ``*`` (from the start of the line if it has no ``$``), compared
    case-insensitively against the two hex digits after the ``*``.

    Returns ABSENT when the line has no two-character ``*``-introduced
    suffix at all, INVALID when the suffix is present but not hex or does
    not match.  Total: never raises.
    """
    star = line.rfind(b"*")
    if star == -1 or len(line) - star != 3:
        return ChecksumStatus.ABSENT
    high, low = line[star + 1], line[star + 2]
    if high not in _HEX_DIGITS or low not in _HEX_DIGITS:
        return ChecksumStatus.INVALID
    fold = 0
    for byte in line[line.find(b"$") + 1 : star]:
        fold ^= byte
    return ChecksumStatus.VALID if fold == int(line[star + 1 :], 16) else ChecksumStatus.INVALID


def iter_classified(stream: BinaryIO, chunk_size: int = 1 << 16) -> Iterator[ClassifiedLine]:
    """Yield a ClassifiedLine for every line in *stream*, in order.

    A trailing unterminated line is yielded last with ``terminated=False``.
    """
    carry = b""
    offset = 0
    line_number = 0
    while True:
        data = stream.read(chunk_size)
        framed, carry = _frame(carry + data)
        for raw, span in framed:
            line_number += 1
            yield ClassifiedLine(
                raw=raw,
                message_class=classify_line(raw),
                checksum_status=verify_checksum(raw),
                segment_offset=offset,
                line_number=line_number,
            )
            offset += span
        if not data:
            break
    if carry:
        yield ClassifiedLine(
            raw=carry,
            message_class=classify_line(carry),
            checksum_status=verify_checksum(carry),
            segment_offset=offset,
            line_number=line_number + 1,
            terminated=False,
        )


@dataclass
class ClassificationReport:
    segment: str
    total_lines: int
    quarantined_lines: int
    counts: dict[str, int]
    output_paths: dict[str, str]
    checksum_counts: dict[str, int]
    trailing_unterminated: bool

    def to_json(self) -> dict:
        return {
            "segment": self.segment,
            "total_lines": self.total_lines,
            "quarantined_lines": self.quarantined_lines,
            "counts": self.counts,
            "output_paths": self.output_paths,
            "checksum_counts": self.checksum_counts,
            "trailing_unterminated": self.trailing_unterminated,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ClassificationReport":
        return cls(**payload)


REPORT_NAME = "report.json"


def route(
    segment_path: Path,
    out_dir: Path,
    *,
    quarantine_invalid: bool = True,
) -> ClassificationReport:
    """Write every line of a closed segment into exactly one per-class file.

    Recognized classes with valid-or-absent checksums go to
    ``<label>.txt``; unknown lines, overlong lines, and (by default)
    invalid-checksum lines go to ``quarantine.txt``.  Within each file,
    lines keep their segment order and exact byte content.  Re-running on
    the same segment reproduces byte-identical outputs.

    A ``report.json`` with the counts is written last, so its presence
    marks a completed classification.
    """
    segment_path = Path(segment_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    counts: dict[str, int] = {}
    checksum_counts = {status.value: 0 for status in ChecksumStatus}
    writers: dict[str, BinaryIO] = {}
    total = 0
    trailing_unterminated = False
    try:
        with open(segment_path, "rb") as stream:
            for entry in iter_classified(stream):
                total += 1
                checksum_counts[entry.checksum_status.value] += 1
                if not entry.terminated:
                    trailing_unterminated = True
                label = entry.message_class.label
                if (
                    entry.message_class.kind is MessageKind.UNKNOWN
                    or len(entry.raw) > MAX_LINE_BYTES
                    or (quarantine_invalid and entry.checksum_status is ChecksumStatus.INVALID)
                ):
                    label = QUARANTINE_LABEL
                writer = writers.get(label)
                if writer is None:
                    writer = open(out_dir / f"{label}.txt", "wb")
                    writers[label] = writer
                writer.write(entry.raw + b"\n")
                counts[label] = counts.get(label, 0) + 1
    finally:
        for writer in writers.values():
            writer.close()

    report = ClassificationReport(
        segment=segment_path.name,
        total_lines=total,
        quarantined_lines=counts.get(QUARANTINE_LABEL, 0),
        counts=dict(sorted(counts.items())),
        output_paths={label: f"{label}.txt" for label in sorted(writers)},
        checksum_counts=checksum_counts,
        trailing_unterminated=trailing_unterminated,
    )
    atomic_write_json(out_dir / REPORT_NAME, report.to_json())
    return report
