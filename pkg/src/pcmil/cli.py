"""Command-line entrypoint.

Subcommands cover the whole pipeline: ``synth``, ``bags``, ``allocate``,
``train``, ``eval``, ``sweep``, and ``heatmap``. Every command reads and
writes plain files, so stages can be rerun independently. Logs go to stderr;
data goes to files.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import pipeline, storage
from .allocation import CompositionVector
from .errors import ConfigError, DataFormatError
from .evaluation import context_matrix, export_heatmap, write_matrix_csv
from .geometry import Context, parse_context
from .model import load_params, save_params
from .pipeline import Cohort, derived_seed
from .synthcohort import SynthConfig, generate_cohort, oracle_truth_region_labels
from .training import TrainConfig, train, write_history_csv

log = logging.getLogger("pcmil")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def parse_alpha(text: str) -> CompositionVector:
    try:
        percents = [int(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"alpha must be four comma-separated integers: {text!r}")
    try:
        return CompositionVector.from_percents(percents)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_alpha_file(path: str | Path) -> list[CompositionVector]:
    alphas = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            alphas.append(parse_alpha(line))
    if not alphas:
        raise ConfigError(f"{path}: no composition vectors found")
    return alphas


def default_sweep_alphas() -> list[CompositionVector]:
    text = resources.files("pcmil.data").joinpath("default_sweep.txt").read_text()
    return [
        parse_alpha(line.split("#", 1)[0].strip())
        for line in text.splitlines()
        if line.split("#", 1)[0].strip()
    ]


def _require_files(*paths: str | Path | None) -> None:
    for path in paths:
        if path is not None and not Path(path).exists():
            raise ConfigError(f"input path does not exist: {path}")


def _load_cohort(args) -> Cohort:
    _require_files(args.manifest, args.annotations, args.embeddings, getattr(args, "tissue", None))
    return pipeline.load_cohort(
        args.manifest, args.annotations, args.embeddings, getattr(args, "tissue", None)
    )


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config is not None:
        _require_files(args.config)
        values = storage.parse_config_file(args.config)
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "lr",
            "weight_decay",
            "beta1",
            "beta2",
            "eps",
            "max_epochs",
            "patience",
            "tau",
            "seed",
        )
    }
    return TrainConfig.from_mapping(values, **overrides)


def cmd_synth(args) -> int:
    config = SynthConfig(
        n_slides=args.n_slides,
        grid_rows=args.rows,
        grid_cols=args.cols,
        d=args.dim,
        lesion_rate=args.lesion_rate,
        lesion_side_range=tuple(args.lesion_side),
        delta=args.delta,
        sigma=args.sigma,
        stroma_fraction=args.stroma_fraction,
        annotation_fraction=args.annotation_fraction,
        seed=args.seed,
    )
    fractions = tuple(args.split_fractions)
    cohort = pipeline.cohort_from_synth(config, fractions)
    out = Path(args.out)
    paths = pipeline.write_cohort(cohort, out)
    slides = generate_cohort(config)
    storage._write_jsonl(
        out / "truth_2mm.jsonl",
        (
            {"id": s.grid.slide_id, "region": list(key), "label": label}
            for s in slides
            for key, label in sorted(
                oracle_truth_region_labels(s, Context.MM2).items()
            )
        ),
    )
    log.info("wrote cohort of %d slides to %s", len(cohort.slides), out)
    for name, path in paths.items():
        log.info("  %s: %s", name, path)
    return EXIT_OK


def cmd_bags(args) -> int:
    cohort = _load_cohort(args)
    context = parse_context(args.context)
    bags = []
    for s in cohort.slides:
        if args.split != "all" and s.split != args.split:
            continue
        bags.extend(
            pipeline.build_bags(
                s.grid, s.store, s.annotations, context, s.split, args.threshold
            )
        )
    storage.write_bag_manifest(args.out, bags)
    log.info("wrote %d %s bags to %s", len(bags), context.token, args.out)
    return EXIT_OK


def cmd_allocate(args) -> int:
    cohort = _load_cohort(args)
    alpha = parse_alpha(args.alpha)
    assignment = pipeline.allocate_split(
        cohort, args.split, alpha, args.seed, args.threshold
    )
    storage.write_assignment(args.out, assignment)
    log.info("assigned %d %s slides; wrote %s", len(assignment), args.split, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cohort = _load_cohort(args)
    _require_files(args.assignment, args.val_assignment)
    config = _train_config(args)
    train_assignment = storage.read_assignment(args.assignment)
    val_assignment = storage.read_assignment(args.val_assignment)
    train_bags = pipeline.balance_bags(
        pipeline.bags_for_assignment(cohort, train_assignment, args.threshold),
        derived_seed(config.seed, pipeline._BALANCE_TAG),
    )
    val_bags = pipeline.bags_for_assignment(cohort, val_assignment, args.threshold)
    report = train(
        train_bags,
        val_bags,
        cohort.embed_dim,
        config,
        attention_dim=args.attention_dim,
        aggregator=args.aggregator,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "checkpoint.pcmw", report.best_params)
    write_history_csv(out / "history.csv", report)
    log.info(
        "best epoch %d, val balanced accuracy %.2f; checkpoint in %s",
        report.best_epoch,
        report.history[report.best_epoch].val_ba,
        out,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cohort = _load_cohort(args)
    _require_files(args.checkpoint)
    params = load_params(args.checkpoint)
    sets = pipeline.context_bag_sets(cohort, args.split, args.threshold)
    matrix = context_matrix(params, sets, args.tau)
    write_matrix_csv(args.out, matrix)
    log.info("wrote context metrics to %s", args.out)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    _require_files(args.manifest, args.embeddings, args.checkpoint, getattr(args, "tissue", None))
    entries = storage.read_slide_manifest(args.manifest)
    tissue = storage.read_tissue_list(args.tissue) if args.tissue else None
    grids = storage.grids_from_manifest(entries, tissue)
    if args.slide not in grids:
        raise ConfigError(f"slide {args.slide!r} not in manifest")
    store = storage.read_embedding_store(Path(args.embeddings) / f"{args.slide}.bin")
    params = load_params(args.checkpoint)
    paths = export_heatmap(params, grids[args.slide], store, args.out)
    for kind, path in paths.items():
        log.info("wrote %s map: %s", kind, path)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cohort = _load_cohort(args)
    config = _train_config(args)
    if args.alphas is not None:
        _require_files(args.alphas)
        alphas = read_alpha_file(args.alphas)
    elif args.alpha is not None:
        alphas = [parse_alpha(args.alpha)]
    else:
        alphas = default_sweep_alphas()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = pipeline.run_sweep(
        cohort,
        alphas,
        config,
        out_dir=out,
        attention_dim=args.attention_dim,
        threshold=args.threshold,
        parallel=args.parallel,
    )
    failed = [row["alpha"] for row in rows if row["error"]]
    log.info("sweep finished: %d rows, %d failed; %s", len(rows), len(failed), out / "sweep.csv")
    if failed:
        log.warning("failed compositions: %s", "; ".join(failed))
    return EXIT_OK


def _add_cohort_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, help="slide manifest JSONL")
    parser.add_argument("--annotations", required=True, help="annotation JSONL")
    parser.add_argument("--embeddings", required=True, help="embedding store directory")
    parser.add_argument("--tissue", default=None, help="tissue list JSONL (optional)")
    parser.add_argument(
        "--threshold",
        type=int,
        default=26,
        help="minimum annotated patches for a usable region",
    )


def _add_train_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    parser.add_argument("--beta1", type=float, default=None)
    parser.add_argument("--beta2", type=float, default=None)
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--attention-dim", dest="attention_dim", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcmil",
        description="Progressive-context multiple instance learning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-slides", dest="n_slides", type=int, default=60)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--cols", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--lesion-rate", dest="lesion_rate", type=float, default=0.5)
    p.add_argument(
        "--lesion-side",
        dest="lesion_side",
        type=int,
        nargs=2,
        default=[8, 16],
        metavar=("MIN", "MAX"),
    )
    p.add_argument("--delta", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--stroma-fraction", dest="stroma_fraction", type=float, default=0.3)
    p.add_argument(
        "--annotation-fraction", dest="annotation_fraction", type=float, default=0.6
    )
    p.add_argument(
        "--split-fractions",
        dest="split_fractions",
        type=float,
        nargs=3,
        default=[0.7, 0.15, 0.15],
        metavar=("TRAIN", "VAL", "TEST"),
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bags", help="build a bag manifest at one context")
    _add_cohort_arguments(p)
    p.add_argument("--context", required=True, choices=["slide", "4mm", "2mm", "1mm"])
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bags)

    p = sub.add_parser("allocate", help="assign slides to supervision contexts")
    _add_cohort_arguments(p)
    p.add_argument("--alpha", required=True, help="percents, e.g. 90,6,2,2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("train", help="train from context assignments")
    _add_cohort_arguments(p)
    p.add_argument("--assignment", required=True, help="training assignment JSONL")
    p.add_argument(
        "--val-assignment", dest="val_assignment", required=True,
        help="validation assignment JSONL",
    )
    _add_train_arguments(p)
    p.add_argument("--aggregator", default="gated", choices=["gated", "mean", "max"])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint across contexts")
    _add_cohort_arguments(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate a list of compositions")
    _add_cohort_arguments(p)
    p.add_argument("--alphas", default=None, help="sweep file, one alpha per line")
    p.add_argument("--alpha", default=None, help="single alpha, e.g. 90,6,2,2")
    _add_train_arguments(p)
    p.add_argument("--parallel", type=int, default=1, metavar="N")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="export attention and region maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tissue", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True, help="slide id")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataFormatError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
