"""Command-line front end: one subcommand per pipeline stage plus ``run``.

Seed precedence is ``--seed``, then the ``LATTICELAB_SEED`` environment
variable, then the config file.  All other flags override their config
counterparts only when given.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .pipeline import (
    ConfigError,
    ExperimentConfig,
    PipelineError,
    load_config,
    run_pipeline,
)
from .report import RunReport, emit_report

SEED_ENV_VAR = "LATTICELAB_SEED"

_STAGE_COMMANDS = (
    "preprocess",
    "synth",
    "train-lm",
    "decode",
    "score",
    "classify",
    "attribute",
)

_MODE_BY_FLAG = {"best-path": "best_path", "beam": "beam"}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override the output directory")

    decoding = argparse.ArgumentParser(add_help=False)
    decoding.add_argument(
        "--mode", choices=sorted(_MODE_BY_FLAG), help="decoding mode"
    )
    decoding.add_argument("--beam-width", type=int, help="beam size")
    decoding.add_argument(
        "--alpha", type=float, help="language model weight during fusion"
    )
    decoding.add_argument(
        "--beta", type=float, help="bonus added per completed word"
    )

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument(
        "--bootstrap", type=int, help="number of bootstrap evaluation runs"
    )

    parser = argparse.ArgumentParser(
        prog="latticelab",
        description="decode emission lattices and evaluate screening metrics",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("preprocess", parents=[common], help="transcripts to corpus files")
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("train-lm", parents=[common], help="estimate the language model")
    sub.add_parser("decode", parents=[common, decoding], help="decode lattices")
    sub.add_parser("score", parents=[common], help="error rates for decodes")
    sub.add_parser("classify", parents=[common, sampling], help="screening metrics")
    sub.add_parser("attribute", parents=[common], help="span attributions")
    sub.add_parser(
        "run", parents=[common, decoding, sampling], help="run configured stages"
    )
    report = sub.add_parser("report", parents=[common], help="render a finished run")
    report.add_argument(
        "--format", choices=("text", "json"), default="text", help="output form"
    )
    return parser


def _effective_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)

    seed = config.seed
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from None
    if args.seed is not None:
        seed = args.seed

    updates: dict = {"seed": seed}
    if args.out is not None:
        updates["out_dir"] = args.out
    if getattr(args, "bootstrap", None) is not None:
        updates["n_bootstrap"] = args.bootstrap

    decoder_updates: dict = {}
    if getattr(args, "mode", None) is not None:
        decoder_updates["mode"] = _MODE_BY_FLAG[args.mode]
    if getattr(args, "beam_width", None) is not None:
        decoder_updates["beam_width"] = args.beam_width
    if getattr(args, "alpha", None) is not None:
        decoder_updates["lm_weight"] = args.alpha
    if getattr(args, "beta", None) is not None:
        decoder_updates["word_bonus"] = args.beta
    if decoder_updates:
        try:
            updates["decoder"] = dataclasses.replace(config.decoder, **decoder_updates)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    if args.command in _STAGE_COMMANDS:
        updates["stages"] = (args.command,)
    try:
        return dataclasses.replace(config, **updates)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _render_report(config: ExperimentConfig, fmt: str) -> int:
    path = Path(config.out_dir) / "report.json"
    if not path.exists():
        print(f"error: no report at {path}; run the report stage first", file=sys.stderr)
        return 1
    report = RunReport.from_json(path.read_text(encoding="utf-8"))
    end = "" if fmt == "json" else "\n"
    print(emit_report(report, fmt), end=end)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        config = _effective_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "report":
        return _render_report(config, args.format)

    try:
        report = run_pipeline(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.command == "run" and "report" in config.stages:
        print(emit_report(report, "text"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
