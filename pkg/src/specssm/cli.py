"""Command-line driver: ``specssm <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .geomcore import DataError, NumericalError
from .synth import FamilySpec, generate_family, write_family

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
VERBS = ("gen-synth", "preprocess", "train", "correspond", "build-ssm", "eval", "sample")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' pipeline config file")
    common.add_argument("--seed", type=int, help="global seed (folds, training, sampling)")
    common.add_argument("--fold", type=int, help="run a single fold instead of all")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS and no worker pool")
    common.add_argument("--workers", type=int, help="worker pool size for per-shape and per-pair work")
    common.add_argument("--descriptor", choices=pipeline.DESCRIPTORS)
    common.add_argument("--strict-paper-sampling", action="store_true",
                        help="scale sampled modes by the eigenvalue instead of its square root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="specssm", description="Spectral correspondence and statistical shape models.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    gen = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic shape family")
    gen.add_argument("spec", type=Path, help="family spec file ('key = value' lines)")
    gen.add_argument("--out", type=Path, help="output directory (default: data_dir from the config)")
    for verb, text in [("preprocess", "mesh extraction, subsampling, graphs and spectra"),
                       ("train", "train the descriptor network per fold"),
                       ("correspond", "template selection and bijective point maps"),
                       ("build-ssm", "Procrustes alignment and point distribution model"),
                       ("eval", "generality, specificity and correspondence error"),
                       ("sample", "draw shapes from the model and plot the eigenvalues")]:
        sub.add_parser(verb, parents=[common], help=text)
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.from_text(args.config.read_text()) if args.config else pipeline.PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.descriptor is not None:
        updates["descriptor"] = args.descriptor
    if args.strict_paper_sampling:
        updates["strict_paper_sampling"] = True
    if args.deterministic:
        updates["workers"] = 1
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def cmd_gen_synth(spec_path: Path, out_dir: Path, seed: int | None = None) -> Path:
    spec = FamilySpec.from_text(Path(spec_path).read_text())
    if seed is not None:
        spec = replace(spec, seed=seed)
    members = generate_family(spec)
    write_family(out_dir, spec, members)
    return Path(out_dir)


STAGES = {
    "preprocess": lambda cfg, fold: pipeline.preprocess(cfg),
    "train": pipeline.train_stage,
    "correspond": pipeline.correspond_stage,
    "build-ssm": pipeline.build_ssm_stage,
    "eval": pipeline.eval_stage,
    "sample": pipeline.sample_stage,
}


def run(args) -> None:
    if args.verb == "gen-synth":
        if args.config is None and args.out is None:
            raise UsageError("gen-synth needs --out or a --config with data_dir")
        out = args.out or Path(load_config(args).data_dir)
        cmd_gen_synth(args.spec, out, args.seed)
        return
    cfg = load_config(args)
    STAGES[args.verb](cfg, args.fold)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"specssm: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(limits=1) if args.deterministic else nullcontext()
    try:
        with limits:
            run(args)
    except UsageError as err:
        print(f"specssm: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as err:
        print(f"specssm: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"specssm: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
