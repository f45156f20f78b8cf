"""Command-line front end: campaigns, trace reduction, fixtures, reports.

Exit codes: 0 on success, 2 when no input sample is detected by the oracle,
3 when the oracle fails its health check, 1 for any other handled error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .campaign import (
    CampaignConfig,
    CampaignStats,
    render_cause_table,
    run_campaign,
    trace_from_json,
)
from .errors import NoDetectedSamples, OracleUnhealthy, PebanditError
from .minimizer import minimize
from .oracle import make_oracle

EXIT_ERROR = 1
EXIT_NO_DETECTED = 2
EXIT_ORACLE_UNHEALTHY = 3


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = CampaignConfig(
        oracle=args.oracle,
        samples_dir=args.samples_dir,
        output_dir=args.out,
        max_attempts=args.max_attempts,
        seed=args.seed,
        content_pool_dir=args.content_pool,
        name_list_path=args.names,
        workers=args.workers,
        minimize=not args.no_minimize,
        transfer_oracles=tuple(args.transfer_oracle),
    )
    stats = run_campaign(cfg)
    print(
        f"detected {stats.detected}, evaded {stats.evaded}, "
        f"rate {stats.evasion_rate:.2f}"
    )
    print(f"reports written to {args.out}")
    return 0


def cmd_minimize(args: argparse.Namespace) -> int:
    trace = trace_from_json(Path(args.trace).read_text())
    spec = args.oracle or trace.oracle_ref
    if not spec:
        print("no --oracle given and the trace records none", file=sys.stderr)
        return EXIT_ERROR
    oracle = make_oracle(spec)
    if not oracle.healthy():
        raise OracleUnhealthy(f"oracle {spec!r} failed its health check")
    mt = minimize(trace, oracle)
    print(f"actions {len(trace.actions)} -> {len(mt.actions)}")
    for act, features in mt.causes:
        names = ",".join(sorted(f.value for f in features))
        print(f"  kept {act.describe()}  cause={names}")
    print(f"bytes changed {mt.bytes_changed}")
    if args.out:
        _write_output(args.out, mt.final_sample)
        print(f"reduced sample written to {args.out}")
    return 0


def _write_output(path: str, data: bytes) -> None:
    out = Path(path)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)


def cmd_fixture_build(args: argparse.Namespace) -> int:
    # imported here so plain report/minimize runs never pay for it
    from .fixtures import build_fixture, parse_fixture_spec

    data = build_fixture(parse_fixture_spec(Path(args.spec).read_text()))
    _write_output(args.out, data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    stats = CampaignStats.from_json(Path(args.stats).read_text())
    print(render_cause_table(stats), end="")
    if stats.byte_change_histogram:
        print("\nbytes changed        evasions")
        for bucket, count in sorted(stats.byte_change_histogram.items()):
            print(f"{bucket:<20} {count:>9}")
    print(f"\nscans: {stats.scan_counts}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pebandit",
        description="Blackbox evasion search for PE binaries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    attack = sub.add_parser("attack", help="run an evasion campaign over a sample set")
    attack.add_argument("--samples-dir", required=True, help="directory of input samples")
    attack.add_argument(
        "--oracle", required=True, help="builtin:<name>[:<params>] or an http(s) URL"
    )
    attack.add_argument("--max-attempts", type=int, default=60)
    attack.add_argument("--seed", type=int, default=0)
    attack.add_argument("--content-pool", default=None, help="directory of benign blobs")
    attack.add_argument("--names", default=None, help="file of benign section names")
    attack.add_argument("--out", required=True, help="report and output directory")
    attack.add_argument("--workers", type=int, default=1)
    attack.add_argument("--no-minimize", action="store_true")
    attack.add_argument(
        "--transfer-oracle",
        action="append",
        default=[],
        metavar="ORACLE",
        help="extra oracle to score transfer against (repeatable)",
    )
    attack.set_defaults(func=cmd_attack)

    mini = sub.add_parser("minimize", help="reduce a recorded trace to its core")
    mini.add_argument("--trace", required=True, help="trace JSON file")
    mini.add_argument(
        "--oracle", default=None, help="defaults to the oracle recorded in the trace"
    )
    mini.add_argument("-o", "--out", default=None, help="write the reduced sample here")
    mini.set_defaults(func=cmd_minimize)

    fixture = sub.add_parser("fixture", help="work with synthetic test binaries")
    fixture_sub = fixture.add_subparsers(dest="fixture_command", required=True)
    build = fixture_sub.add_parser("build", help="build a binary from a spec file")
    build.add_argument("spec", help="fixture spec file")
    build.add_argument("-o", "--out", required=True, help="output file")
    build.set_defaults(func=cmd_fixture_build)

    report = sub.add_parser("report", help="print a summary from a stats file")
    report.add_argument("--stats", required=True, help="stats.json from a campaign")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoDetectedSamples as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_DETECTED
    except OracleUnhealthy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE_UNHEALTHY
    except PebanditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
