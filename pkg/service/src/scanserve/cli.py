"""Command line entry point for the scan service."""

from __future__ import annotations

import argparse
import sys

from .models import ModelError, parse_model_spec
from .server import BindError, ServiceConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scanserve",
        description="Reference HTTP scanner with selectable toy models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("serve", help="start the scan service")
    run.add_argument(
        "--model",
        required=True,
        help="byte-mean:<threshold> or name-blocklist:<name>[,<name>...]",
    )
    run.add_argument("--addr", default="127.0.0.1:8080", help="host:port to listen on")
    run.add_argument(
        "--delay-ms",
        type=int,
        default=0,
        help="artificial delay before each response, in milliseconds",
    )
    run.set_defaults(func=cmd_serve)
    return parser


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = ServiceConfig(
        model=parse_model_spec(args.model),
        listen_addr=args.addr,
        artificial_delay=args.delay_ms / 1000,
    )
    service = serve(cfg)
    print(f"scanserve listening on {service.url}", flush=True)
    try:
        service.wait()
    except KeyboardInterrupt:
        service.close()
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
