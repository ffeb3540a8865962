"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config, missing
or inconsistent inputs), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _validation_errors() -> tuple:
    from .config import ConfigError
    from .corpus import CorpusError
    from .dsp import DspError
    from .metrics import MetricError
    from .nn import CheckpointError
    from .pipeline import PipelineError
    from .prosody.bins import BinError
    from .prosody.duration import DurationError
    from .translator import TranslatorError
    from .units import UnitFormatError
    return (ConfigError, CorpusError, DspError, MetricError, CheckpointError, PipelineError,
            BinError, DurationError, TranslatorError, UnitFormatError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emounits", description="Textless emotion conversion over discrete speech units.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    # Accepted before or after the subcommand; SUPPRESS keeps the subparser from clobbering.
    for parser, default in ((p, None), (common, argparse.SUPPRESS)):
        parser.add_argument("--seed", type=int, default=default, help="override the config seed")
        mode = parser.add_mutually_exclusive_group()
        mode.add_argument("--quiet", action="store_true", default=default or False,
                          help="print only the result")
        mode.add_argument("--json", action="store_true", default=default or False,
                          help="print the result as JSON")
    cfg = _Parser(add_help=False)
    cfg.add_argument("-c", "--config", required=True, type=Path, help="pipeline TOML file")

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("gen-corpus", parents=[common, cfg], help="generate the synthetic corpus")
    s.add_argument("-o", "--out", type=Path, help="corpus directory (default: paths.corpus)")

    s = sub.add_parser("train", parents=[common, cfg], help="train one or all model stages")
    s.add_argument("--stage", required=True, choices=("translator", "duration", "f0", "all"))
    s.add_argument("--pretrain", action="store_true", help="denoising pretraining before fine-tuning")

    s = sub.add_parser("convert", parents=[common, cfg], help="convert a manifest to a target emotion")
    s.add_argument("--in", dest="manifest", required=True, type=Path)
    s.add_argument("--emotion", required=True)
    s.add_argument("-o", "--out", type=Path)

    s = sub.add_parser("synth", parents=[common, cfg], help="render converted units and F0 to WAV")
    s.add_argument("--in", dest="manifest", required=True, type=Path)
    s.add_argument("-o", "--out", type=Path)

    s = sub.add_parser("evaluate", parents=[common, cfg], help="score the trained pipeline on the test split")
    s.add_argument("--force", action="store_true", help="accept artifacts from a different config")
    s.add_argument("-o", "--out", type=Path)
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--eps", type=float, default=1e-5)

    s = sub.add_parser("benchmark", parents=[common, cfg], help="F0 config grid and duration model table")
    s.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    s.add_argument("--only", choices=("f0", "duration"))
    s.add_argument("-o", "--out", type=Path)
    s.add_argument("--no-figures", action="store_true")
    return p


def _load(args):
    from .config import load_config
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def run(args, log) -> dict:
    from . import pipeline
    cmd = args.command
    if cmd == "grad-check":
        from .verify import GRAD_TOLERANCE, run_grad_checks
        errs = run_grad_checks(seed=args.seed or 0, eps=args.eps)
        return {"max_relative_error": errs, "tolerance": GRAD_TOLERANCE,
                "passed": all(e < GRAD_TOLERANCE for e in errs.values())}
    cfg = _load(args)
    if cmd == "gen-corpus":
        return {"corpus": str(pipeline.gen_corpus(cfg, args.out, log)), "config_hash": cfg.hash()}
    if cmd == "train":
        paths = pipeline.train(cfg, args.stage, True if args.pretrain else None, log)
        return {"checkpoints": [str(x) for x in paths], "config_hash": cfg.hash()}
    if cmd == "convert":
        return {"output": str(pipeline.convert(cfg, args.manifest, args.emotion, args.out, log))}
    if cmd == "synth":
        return {"output": str(pipeline.synth(cfg, args.manifest, args.out, log))}
    if cmd == "evaluate":
        report = pipeline.evaluate(cfg, args.out, args.force, not args.no_figures, log)
        return {"aggregate": report.to_dict()["aggregate"], "counts": report.counts,
                "config_hash": report.config_hash}
    if cmd == "benchmark":
        which = (args.only,) if args.only else ("f0", "duration")
        res = pipeline.benchmark(cfg, _seeds(args.seeds), args.out, which, not args.no_figures, log)
        return {k: [r for r in v if r["seed"] == "median"] for k, v in res.items()}
    raise UsageError(f"unknown command {cmd!r}")


def _print_result(cmd: str, result: dict) -> None:
    if cmd == "grad-check":
        for name, err in result["max_relative_error"].items():
            print(f"{name}\t{err:.3e}\t{'ok' if err < result['tolerance'] else 'FAIL'}")
        return
    for key, val in result.items():
        if isinstance(val, dict):
            for k, v in val.items():
                print(f"{key}.{k}\t{v}")
        elif isinstance(val, list) and val and isinstance(val[0], dict):
            print(f"# {key}")
            fields = list(val[0])
            print("\t".join(fields))
            for r in val:
                print("\t".join(f"{r[f]:.6f}" if isinstance(r[f], float) else str(r[f]) for f in fields))
        elif isinstance(val, list):
            for v in val:
                print(f"{key}\t{v}")
        else:
            print(f"{key}\t{val}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    quiet = args.quiet or args.json

    def log(msg: str) -> None:
        if not quiet:
            print(msg, file=sys.stderr, flush=True)

    try:
        result = run(args, log)
    except UsageError as exc:
        print(f"emounits: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _validation_errors() as exc:
        print(f"emounits: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("emounits: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        print(f"emounits: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.json:
        print(json.dumps(result, sort_keys=True, default=str))
    else:
        _print_result(args.command, result)
    if args.command == "grad-check" and not result["passed"]:
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
