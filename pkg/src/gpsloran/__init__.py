"""Toolkit for capturing and managing integrated GPS/Loran receiver output.

The package is organized as a pipeline of independent stages:

- :mod:`gpsloran.record` -- lossless byte capture from a receiver stream,
  with time-based segment rotation.
- :mod:`gpsloran.classify` -- split raw bytes into lines and sort them into
  per-message-type files by header, with checksum screening.
- :mod:`gpsloran.parse` -- decode GPS fixes and Loran measurements from
  classified sentence files into typed records.
- :mod:`gpsloran.convert` -- merge parsed records into a single
  timestamp-ordered timeline and export it in delimited formats.
- :mod:`gpsloran.orchestrate` -- run the stages unattended on a rotation
  schedule, with crash recovery.
- :mod:`gpsloran.simulate` -- deterministic receiver simulator for testing
  the pipeline end to end.

Each stage can also be driven from the command line; see :mod:`gpsloran.cli`.
"""

__version__ = "0.1.0"
