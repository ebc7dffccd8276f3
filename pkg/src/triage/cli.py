"""Command-line entry point: ``triage {generate,train,evaluate,predict,hyperopt,serve}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training failure.
Results go to files under the output directory; stderr carries only log
messages and the reason for a failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .corpus import DatasetError
from .ecd import ConfigError
from .pipeline import (
    TrainingError,
    cmd_evaluate,
    cmd_generate,
    cmd_hyperopt,
    cmd_predict,
    cmd_train,
    load_experiment,
)

log = logging.getLogger("triage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (YAML)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")
    common.add_argument("--format", choices=("delimited", "json-lines"), default="json-lines",
                        help="dataset file format")
    common.add_argument("--top-k", type=int, default=None, help="suggestions per ticket (default 3)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="triage", description="Ticket triage experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    sub.add_parser("train", parents=[common], help="train the configured model")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a trained model")
    ev.add_argument("--split", choices=("validation", "test"), default="test")
    pr = sub.add_parser("predict", parents=[common], help="rank suggestions for new tickets")
    pr.add_argument("--input", required=True, help="tickets to score")
    sub.add_parser("hyperopt", parents=[common], help="random search over model settings")
    sv = sub.add_parser("serve", parents=[common], help="run the suggestion service over HTTP")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--store", default=None, help="ticket store directory (default OUT/store)")
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.top_k is not None and args.top_k < 1:
            raise UsageError("--top-k must be >= 1")
        cfg = load_experiment(args.config, args.seed, args.out)
        if args.command == "generate":
            cmd_generate(cfg, args.format)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.split, args.top_k)
        elif args.command == "predict":
            cmd_predict(cfg, args.input, args.format, args.top_k)
        elif args.command == "hyperopt":
            cmd_hyperopt(cfg)
        elif args.command == "serve":
            from .serve.http import serve_forever
            serve_forever(cfg, args.host, args.port, args.store)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if getattr(e, "filename", None) == args.config else EXIT_DATA
    except (DatasetError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
