"""Command line entry point: ``cds <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .analyzer import emit_report, rank_correlation, spearman_standard, to_ranks
from .controller import ControllerConfig
from .gateway import load_clock_script, serve
from .harness import Scenario, bundled_scenarios, measure_latency, render_latency_table, run_scenario
from .hashstore import StoreError, load_key_file, provision


def _cmd_provision(args) -> int:
    key = load_key_file(args.key_file)
    data = args.data or Path(args.store).resolve().parent / "data"
    manifest = provision(args.golden, args.replicas, key, args.store, data)
    print(
        f"provisioned {manifest.entry_count} pages x {manifest.replica_count} replicas "
        f"(key fingerprint {manifest.store_key_fingerprint.hex()})"
    )
    return 0


def _cmd_serve(args) -> int:
    config = ControllerConfig.from_file(args.config) if args.config else ControllerConfig()
    key = load_key_file(args.key_file)
    script = load_clock_script(args.clock) if args.clock else None
    if script is not None and not args.deterministic:
        print("--clock requires --deterministic", file=sys.stderr)
        return 2
    serve(
        args.listen, config, args.store, args.golden, args.data, key,
        log_path=args.log, deterministic=args.deterministic, clock_script=script,
    )
    return 0


def _cmd_report(args) -> int:
    paths = emit_report(args.log, args.out, window=args.window, alarm_path=args.alarms)
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(Path(paths["summary"]).read_text("utf-8"), end="")
    return 0


def _read_rank_csv(path: str) -> tuple[list[str], list[float], list[float]]:
    """Rows of ``name,a,b`` (header optional)."""
    names, a, b = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                x, y = float(row[1]), float(row[2])
            except (ValueError, IndexError):
                if not names:
                    continue  # header
                raise ValueError(f"bad row {row!r}") from None
            names.append(row[0])
            a.append(x)
            b.append(y)
    return names, a, b


def _cmd_rankcorr(args) -> int:
    names, a, b = _read_rank_csv(args.csv)
    ra, rb = to_ranks(a), to_ranks(b)
    fn = spearman_standard if args.standard else rank_correlation
    for n, x, y in zip(names, ra, rb):
        print(f"{n}\t{x}\t{y}")
    print(f"r = {fn(ra, rb):.6g}")
    return 0


def _cmd_harness(args) -> int:
    if args.scenario:
        scenarios = [Scenario.from_file(args.scenario)]
    else:
        scenarios = bundled_scenarios()
    ok = True
    for sc in scenarios:
        result = run_scenario(sc, seed=args.seed)
        ok &= result.passed
        text = result.render() if args.verbose or args.scenario else "\n".join(
            [result.render().splitlines()[0]] + [a.render() for a in result.assertions if not a.passed]
        ) + "\n"
        sys.stdout.write(text)
    return 0 if ok else 1


def _cmd_bench(args) -> int:
    manifest = Path(args.pages)
    pages = []
    for line in manifest.read_text("utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            pages.append(p if p.is_absolute() else manifest.parent / p)
    rows = measure_latency(pages, args.reps, args.replicas)
    sys.stdout.write(render_latency_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cds", description="Hash-verified, self-healing content server")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("provision", help="build the encrypted hash store and replica directories")
    p.add_argument("--golden", required=True, help="directory of original content")
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--store", required=True, help="hash-store file to write")
    p.add_argument("--key-file", required=True, help="16 raw octets or 32 hex characters")
    p.add_argument("--data", help="where replica-<id>/ directories go (default: next to the store)")
    p.set_defaults(func=_cmd_provision)

    p = sub.add_parser("serve", help="run the HTTP server")
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.add_argument("--store", required=True)
    p.add_argument("--golden", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value controller configuration")
    p.add_argument("--key-file", required=True)
    p.add_argument("--log", help="activity log (default: <data>/activity.log)")
    p.add_argument("--deterministic", action="store_true", help="single thread, virtual clock")
    p.add_argument("--clock", help="virtual time script, one millisecond offset per request")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("report", help="summarize an activity log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=100, help="failure-rate window used by the server")
    p.add_argument("--alarms", help="alarm file (default: alarms.log next to the log)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("rankcorr", help="rank correlation of two value columns")
    p.add_argument("--csv", required=True, help="rows of name,a,b")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--paper-formula", action="store_true", help="1 - sum(d^2)/(N(N^2-1)) (default)")
    g.add_argument("--standard", action="store_true", help="Spearman rho with the factor 6")
    p.set_defaults(func=_cmd_rankcorr)

    p = sub.add_parser("harness", help="run fault-injection scenarios")
    p.add_argument("--scenario", help="scenario file (default: the bundled suite)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=_cmd_harness)

    p = sub.add_parser("bench", help="serve-time table with and without verification")
    p.add_argument("--pages", required=True, help="manifest: one page file per line")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--replicas", type=int, default=3)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (StoreError, ValueError, OSError) as exc:
        print(f"cds {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
