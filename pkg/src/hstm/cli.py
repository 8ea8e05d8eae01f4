"""Command-line entry point: ``hstm <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 input error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .analytics import RangeSet, anonymize_ranges, summarize_archive, HierarchyError
from .anonymizer import (
    AnonKey,
    Anonymizer,
    AnonymizerError,
    load_table,
    write_table,
)
from .ingest import PcapError, TrafficModel, synth_arrays, write_pcap
from .pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineError,
    assign_files,
    bench,
    default_workers,
    format_bench,
    pcap_sources,
    run_pipeline,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4

log = logging.getLogger("hstm")


class InputError(Exception):
    pass


def _pow2(text: str) -> int:
    try:
        n = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n <= 0 or n & (n - 1):
        raise argparse.ArgumentTypeError(f"{n} is not a power of two")
    return n


def _positive(text: str) -> int:
    try:
        n = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _nonneg(text: str) -> int:
    n = int(text, 0)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("ring counts must be positive")
    return vals


def _model(text: str) -> TrafficModel:
    try:
        return TrafficModel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hstm", description=(
        "Build anonymized hypersparse traffic matrices from packet streams and analyze them."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=_positive, default=None,
                   help="global cap on worker threads")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("gen-key", help="write a 32-byte anonymization key")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=None,
                   help="derive the key from a seed (reproducible runs only)")

    s = sub.add_parser("gen-table", help="precompute an anonymization lookup table file")
    s.add_argument("--bits", required=True, type=int)
    s.add_argument("--key", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("synth", help="write a synthetic darknet-like pcap")
    s.add_argument("--packets", required=True, type=_nonneg)
    s.add_argument("--model", type=_model, default=TrafficModel(),
                   help="uniform | zipf[:alpha] | scan[:n_sources] (default zipf:1.2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("capture", help="convert pcap inputs into archived window matrices")
    s.add_argument("--in", dest="inputs", required=True,
                   help="comma-separated pcap files, assigned to rings round-robin")
    s.add_argument("--rings", type=_positive, default=1)
    s.add_argument("--key", required=True, type=Path)
    s.add_argument("--table", type=Path, default=None)
    s.add_argument("--mode", choices=("auto", "table", "direct"), default="auto")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--window", type=_pow2, default=1 << 17)
    s.add_argument("--block", type=_pow2, default=None,
                   help="packets per archive block (default window * per-tar)")
    s.add_argument("--per-tar", type=_pow2, default=64)
    s.add_argument("--queue-depth", type=_positive, default=2)
    s.add_argument("--flush-partial", action="store_true")
    s.add_argument("--gzip", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--single-threaded", action="store_true")
    s.add_argument("--json", action="store_true", help="print the report as JSON (default)")

    s = sub.add_parser("analyze", help="network quantities from archived matrices")
    s.add_argument("--tar", nargs="*", default=[], type=Path)
    s.add_argument("--levels", type=_nonneg, default=0)
    s.add_argument("--range", dest="ranges", default=None, help="comma-separated CIDR blocks")
    s.add_argument("--raw-range", action="store_true",
                   help="--range is in raw address space; translate it with --key")
    s.add_argument("--key", type=Path, default=None)
    s.add_argument("--exclude", action="store_true", help="drop the range instead of keeping it")
    s.add_argument("--histograms", action="store_true")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out", type=Path, default=None)

    s = sub.add_parser("bench", help="packets/sec versus ring count on preloaded packets")
    s.add_argument("--packets", type=_positive, default=1 << 22)
    s.add_argument("--rings-list", type=_int_list, default=[1, 2, 4, 8])
    s.add_argument("--repeats", type=_positive, default=5)
    s.add_argument("--model", type=_model, default=TrafficModel())
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--key", type=Path, default=None)
    s.add_argument("--window", type=_pow2, default=1 << 17)
    s.add_argument("--per-tar", type=_pow2, default=64)
    s.add_argument("--gzip", action="store_true")
    s.add_argument("--json", action="store_true")
    return p


def _emit(text: str, out: Path | None = None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        out.write_text(text)


def cmd_gen_key(args) -> int:
    key = AnonKey.from_seed(args.seed) if args.seed is not None else AnonKey.generate()
    key.save(args.out)
    log.info("wrote key %s (fingerprint %s)", args.out, key.fingerprint.hex())
    return EXIT_OK


def cmd_gen_table(args) -> int:
    if not 1 <= args.bits <= 32:
        raise InputError(f"--bits must be in [1, 32], got {args.bits}")
    key = AnonKey.load(args.key)
    write_table(key, args.bits, args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    write_pcap(synth_arrays(args.seed, args.packets, args.model), args.out)
    return EXIT_OK


def cmd_capture(args) -> int:
    files = [f for f in args.inputs.split(",") if f]
    block = args.block or args.window * args.per_tar
    if block != args.window * args.per_tar:
        raise argparse.ArgumentTypeError(
            f"--block {block} must equal --window * --per-tar ({args.window * args.per_tar})")
    key = AnonKey.load(args.key)
    table = load_table(args.table, key) if args.table else None
    anonymizer = Anonymizer(key, table, args.mode)
    max_workers = max(1, args.threads - args.rings) if args.threads else None
    cfg = PipelineConfig(
        args.out, n_rings=args.rings, block_packets=block, window_packets=args.window,
        windows_per_tar=args.per_tar, anon_mode=args.mode, queue_depth=args.queue_depth,
        flush_partial=args.flush_partial, gzip=args.gzip, deterministic=args.deterministic,
        max_workers=max_workers, single_threaded=args.single_threaded)
    groups = assign_files(files, args.rings)
    for g in groups:
        for f in g:
            if not f.is_file():
                raise InputError(f"{f}: no such file")
    sources, stats = pcap_sources(groups)
    report = run_pipeline(cfg, sources, anonymizer, stats)
    _emit(report.to_json(indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    ranges = None
    if args.exclude and not args.ranges:
        raise argparse.ArgumentTypeError("--exclude needs --range")
    if args.raw_range and not args.key:
        raise argparse.ArgumentTypeError("--raw-range needs --key")
    if args.ranges:
        try:
            ranges = RangeSet.parse(args.ranges, anonymized=not args.raw_range)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if args.raw_range:
            ranges = anonymize_ranges(ranges, AnonKey.load(args.key))
    workers = args.threads or 1
    report = summarize_archive(args.tar, args.levels, ranges=ranges, exclude=args.exclude,
                               histograms=args.histograms, workers=workers)
    for err in report.errors:
        log.warning("%s: %s: %s", err["archive"], err["entry"], err["error"])
    text = report.to_json(indent=2) if args.format == "json" else report.to_csv()
    _emit(text, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    key = AnonKey.load(args.key) if args.key else AnonKey.from_seed(args.seed)
    anonymizer = Anonymizer(key)
    packets = synth_arrays(args.seed, args.packets, args.model)
    max_workers = None
    if args.threads:
        max_workers = max(1, args.threads - max(args.rings_list))
    rows = bench(packets, anonymizer, args.rings_list, args.repeats,
                 window_packets=args.window, windows_per_tar=args.per_tar,
                 gzip=args.gzip, max_workers=max_workers)
    if args.json:
        _emit(json.dumps({"model": asdict(args.model), "default_workers": default_workers(1),
                          "rows": [asdict(r) for r in rows]}, indent=2))
    else:
        _emit(format_bench(rows))
    return EXIT_OK


COMMANDS = {
    "gen-key": cmd_gen_key,
    "gen-table": cmd_gen_table,
    "synth": cmd_synth,
    "capture": cmd_capture,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"hstm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, PcapError, AnonymizerError, ConfigError, HierarchyError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"hstm {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"hstm {args.command}: {exc}", file=sys.stderr)
        if exc.manifest:
            print("completed archives:\n  " + "\n  ".join(exc.manifest), file=sys.stderr)
        # a bad input file found mid-stream is still an input error
        return EXIT_INPUT if isinstance(exc.__cause__, PcapError) else EXIT_RUNTIME
    except (OSError, RuntimeError, MemoryError) as exc:
        print(f"hstm {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
