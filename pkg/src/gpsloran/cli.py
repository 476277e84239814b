"""Command-line surface for the capture/classify/convert toolkit.

Subcommands::

    record    capture a receiver stream into rotating raw segments
    classify  sort one closed segment into per-message-type files
    convert   parse a classified directory and export the merged timeline
    run       full unattended pipeline driven by a JSON config file
    stats     per-station SNR series and GPS fix series from a session
    recover   finish processing for a session interrupted by a crash
    simulate  generate or serve a deterministic synthetic receiver stream

Exit codes: 0 success, 1 fatal configuration or I/O error, 2 partial
(some segments flagged).  Logs are line-oriented ``key=value`` text on
stderr; command results go to stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import date
from pathlib import Path

from . import classify as classify_mod
from . import convert as convert_mod
from . import orchestrate
from . import simulate as simulate_mod
from .fsutil import read_json
from .parse import parse_classified
from .timeutil import iso_ms, parse_duration


class CliError(Exception):
    """Bad invocation or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep 2 for "partial"
        raise CliError(message)


def _setup_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="ts=%(asctime)s.%(msecs)03dZ level=%(levelname)s logger=%(name)s msg=%(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
    )


# --- subcommand implementations ---------------------------------------------


def cmd_record(args) -> int:
    config = {
        "source": args.source,
        "out_dir": args.out,
        "rotation": args.rotate,
        "flush_interval_s": parse_duration(args.flush_interval),
        "replay_speed": args.replay_speed,
        "on_eof": args.on_eof,
        "process_segments": False,
    }
    if args.session_id:
        config["session_id"] = args.session_id
    return orchestrate.run_pipeline(config)


def cmd_classify(args) -> int:
    report = classify_mod.route(
        Path(args.segment),
        Path(args.out),
        quarantine_invalid=not args.keep_invalid_checksums,
    )
    print(json.dumps(report.to_json()))
    return 0


def cmd_convert(args) -> int:
    classified = Path(args.classified)
    fallback = date.fromisoformat(args.start_date) if args.start_date else None
    try:
        parsed = parse_classified(classified, fallback)
    except ValueError as exc:
        raise CliError(str(exc)) from None

    quarantined = 0
    report_path = classified / classify_mod.REPORT_NAME
    if report_path.exists():
        quarantined = read_json(report_path).get("quarantined_lines", 0)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    orchestrate.write_parse_errors(out_dir / "parse_errors.jsonl", parsed.errors)
    timeline = convert_mod.merge_sort(parsed.gps, parsed.loran)
    manifest = convert_mod.export(
        timeline,
        args.format,
        out_dir,
        session_id=args.session_id,
        parse_errors=len(parsed.errors),
        quarantined=quarantined,
        gap_threshold_s=parse_duration(args.gap_threshold),
    )
    print(json.dumps(manifest["record_counts"]))
    return 0


def cmd_run(args) -> int:
    config = read_json(Path(args.config))
    for key in ("source", "out_dir"):
        if key not in config:
            raise CliError(f"config is missing required key {key!r}")
    return orchestrate.run_pipeline(config)


def cmd_recover(args) -> int:
    return orchestrate.recover(Path(args.state))


def _segment_export_dirs(session_dir: Path) -> list[Path]:
    root = session_dir / "exports"
    if not root.is_dir():
        return []
    return sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))


def _read_segment_file(directory: Path, stem: str, reader):
    for extension in ("csv", "jsonl"):
        path = directory / f"{stem}.{extension}"
        if path.exists():
            return reader(path)
    return []


def _write_series(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_stats(args) -> int:
    session_dir = Path(args.session)
    export_dirs = _segment_export_dirs(session_dir)
    if not export_dirs:
        raise CliError(f"no exports found under {session_dir}")

    gps, loran = [], []
    for directory in export_dirs:
        gps.extend(_read_segment_file(directory, "timeline_gps", convert_mod.read_gps_export))
        loran.extend(
            _read_segment_file(directory, "timeline_loran", convert_mod.read_loran_export)
        )

    timeline = convert_mod.merge_sort(gps, loran)
    summary = convert_mod.summarize(timeline, parse_duration(args.gap_threshold))
    out_dir = Path(args.out) if args.out else session_dir / "stats"
    out_dir.mkdir(parents=True, exist_ok=True)

    fix_rows = [
        [iso_ms(f.timestamp), str(f.lat), str(f.lon), "" if f.alt_m is None else str(f.alt_m)]
        for f in gps
        if not f.no_fix
    ]
    _write_series(out_dir / "gps_fixes.csv", ["timestamp", "lat_deg", "lon_deg", "alt_m"], fix_rows)

    stations = [args.station] if args.station else sorted(summary.stations)
    for station in stations:
        rows = [
            [iso_ms(obs.timestamp), str(obs.snr_db)]
            for obs in loran
            if obs.station == station
        ]
        _write_series(out_dir / f"snr_{station}.csv", ["timestamp", "snr_db"], rows)

    print(
        f"records={summary.total_records} gps_fixes={summary.gps_fix_count} "
        f"no_fix={summary.no_fix_count} loran={sum(s.count for s in summary.stations.values())}"
    )
    if summary.time_span:
        print(f"time_span={iso_ms(summary.time_span[0])}..{iso_ms(summary.time_span[1])}")
    if summary.bbox:
        lat_min, lat_max, lon_min, lon_max = summary.bbox
        print(f"bbox_lat={lat_min}..{lat_max} bbox_lon={lon_min}..{lon_max}")
    for station, stats in summary.stations.items():
        print(
            f"station={station} count={stats.count} snr_min={stats.min_snr} "
            f"snr_mean={stats.mean_snr} snr_max={stats.max_snr}"
        )
    print(f"gaps={len(summary.gaps)}")
    for start, end in summary.gaps:
        print(f"gap={iso_ms(start)}..{iso_ms(end)}")
    return 0


def _parse_pace(text: str) -> tuple[str, float]:
    if text in ("unpaced", "real-time"):
        return text, 1.0
    mode, _, factor = text.partition(":")
    if mode == "accelerated" and factor:
        return "accelerated", float(factor)
    raise CliError(f"bad pace {text!r}; use real-time, unpaced, or accelerated:<factor>")


def cmd_simulate(args) -> int:
    scenario = simulate_mod.Scenario.from_file(Path(args.scenario))
    stream, truth = simulate_mod.generate_stream(scenario)
    if args.truth_dir:
        simulate_mod.write_ground_truth(truth, Path(args.truth_dir))
    summary = {
        "sentences": truth.emitted_sentences,
        "gps_records": len(truth.gps),
        "loran_records": len(truth.loran),
        "corrupted": truth.corrupted_lines,
        "garbage": truth.garbage_lines,
    }
    if args.sim_command == "generate":
        Path(args.out).write_bytes(stream.to_bytes())
        print(json.dumps(summary))
        return 0

    host, _, port = args.listen.rpartition(":")
    pace, factor = _parse_pace(args.pace)
    server = simulate_mod.serve(stream, host or "127.0.0.1", int(port), pace, factor)
    print(f"listening={server.address}", flush=True)
    print(json.dumps(summary), flush=True)
    try:
        server.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gpsloran", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("record", help="capture a stream into rotating raw segments")
    p.add_argument("--source", required=True, help="kind:address, e.g. tcp:host:4001, serial:/dev/ttyUSB0, replay:capture.log")
    p.add_argument("--out", required=True, help="output directory for the session")
    p.add_argument("--rotate", default="utc-midnight", help="utc-midnight (default) or a fixed interval such as 24h")
    p.add_argument("--flush-interval", default="1s", help="durability flush interval (default 1s)")
    p.add_argument("--session-id", default=None)
    p.add_argument("--replay-speed", type=float, default=1.0, help="replay pacing multiplier; 0 = unpaced")
    p.add_argument("--on-eof", choices=("stop", "reconnect"), default="reconnect")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("classify", help="sort one raw segment into per-class files")
    p.add_argument("--segment", required=True, help="closed raw segment file")
    p.add_argument("--out", required=True, help="output directory for class files")
    p.add_argument("--keep-invalid-checksums", action="store_true",
                   help="route checksum-invalid lines to their class file instead of quarantine")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("convert", help="parse classified files and export the merged timeline")
    p.add_argument("--classified", required=True, help="directory produced by classify")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=tuple(convert_mod.FORMAT_EXTENSIONS), default="columns")
    p.add_argument("--session-id", default="")
    p.add_argument("--start-date", default=None, help="fallback date (YYYY-MM-DD) when the segment has no date sentence")
    p.add_argument("--gap-threshold", default="5m")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("run", help="full unattended pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stats", help="emit SNR-vs-time and GPS fix series for a session")
    p.add_argument("--session", required=True, help="session directory (contains exports/)")
    p.add_argument("--station", default=None, help="limit SNR series to one station, e.g. 9930M")
    p.add_argument("--gap-threshold", default="5m")
    p.add_argument("--out", default=None, help="series output directory (default <session>/stats)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("recover", help="resume processing after a crash")
    p.add_argument("--state", required=True, help="session directory containing state.json")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("simulate", help="deterministic receiver simulator")
    sim_sub = p.add_subparsers(dest="sim_command", required=True, parser_class=_Parser)
    g = sim_sub.add_parser("generate", help="write the stream bytes to a file")
    g.add_argument("--scenario", required=True, help="scenario JSON file")
    g.add_argument("--out", required=True, help="output byte-stream file")
    g.add_argument("--truth-dir", default=None, help="also export ground truth here")
    g.set_defaults(func=cmd_simulate)
    s = sim_sub.add_parser("serve", help="serve the stream over TCP")
    s.add_argument("--scenario", required=True)
    s.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 picks a free port)")
    s.add_argument("--pace", default="real-time", help="real-time, unpaced, or accelerated:<factor>")
    s.add_argument("--truth-dir", default=None)
    s.set_defaults(func=cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
