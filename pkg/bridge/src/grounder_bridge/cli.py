"""Command line front end: ``grounder-bridge serve`` on stdio.

Logging goes to stderr so stdout stays a clean protocol stream.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import BridgeConfig
from .server import BridgeServer


def _coerce(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            continue
    return text


def _extra_pair(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, _coerce(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grounder-bridge",
        description="Serve a grounding detection model over newline-delimited JSON.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="answer protocol messages on stdin/stdout")
    serve.add_argument(
        "--backend",
        default="stub",
        help="'stub' or a factory as package.module:attribute (default: stub)",
    )
    serve.add_argument("--stub", dest="backend", action="store_const", const="stub",
                       help="shorthand for --backend stub")
    serve.add_argument("--checkpoint", default="", help="weights path handed to the backend")
    serve.add_argument("--device", default="cpu", help="device spec handed to the backend")
    serve.add_argument("--score-floor", type=float, default=0.3,
                       help="drop detections scoring below this (default: 0.3)")
    serve.add_argument("--max-detections", type=int, default=10,
                       help="cap per-request detections (default: 10)")
    serve.add_argument("--extra", type=_extra_pair, action="append", default=[],
                       metavar="KEY=VALUE",
                       help="extra hyperparameter passed through to training; repeatable")
    serve.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = BridgeConfig(
            backend=args.backend,
            checkpoint=args.checkpoint,
            device=args.device,
            score_floor=args.score_floor,
            max_detections=args.max_detections,
            extra=dict(args.extra),
        )
        server = BridgeServer(config)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    server.serve()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
