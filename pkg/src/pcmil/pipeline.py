"""End-to-end wiring: cohort containers, allocation-aware bag construction,
single-run training, and the composition sweep.

Every stage works from plain files through :mod:`pcmil.storage`, so each CLI
command can run standalone; the in-memory path used by tests goes through the
same functions.
"""

from __future__ import annotations

import logging
import multiprocessing
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import storage
from .allocation import CompositionVector, allocate_contexts, balance_bags
from .bagging import (
    VALIDITY_THRESHOLD,
    Bag,
    PatchAnnotation,
    build_bags,
    has_usable_region,
)
from .evaluation import (
    CONTEXT_COLUMNS,
    ContextMatrix,
    context_matrix,
    write_matrix_csv,
)
from .geometry import REGIONAL_CONTEXTS, Context, SlideGrid
from .model import AbmilParams, save_params
from .storage import EmbeddingStore
from .synthcohort import SynthConfig, assign_splits, generate_cohort
from .training import TrainConfig, TrainReport, train, write_history_csv

log = logging.getLogger(__name__)

_ALLOC_TRAIN_TAG = 11
_ALLOC_VAL_TAG = 12
_BALANCE_TAG = 13


def derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass
class SlideData:
    grid: SlideGrid
    split: str
    annotations: list[PatchAnnotation]
    store: EmbeddingStore


@dataclass
class Cohort:
    slides: list[SlideData]

    def by_split(self, split: str) -> list[SlideData]:
        return [s for s in self.slides if s.split == split]

    def by_id(self, slide_id: str) -> SlideData:
        for s in self.slides:
            if s.grid.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    @property
    def embed_dim(self) -> int:
        dims = {s.store.dim for s in self.slides}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding widths: {sorted(dims)}")
        return dims.pop()


def cohort_from_synth(
    config: SynthConfig,
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> Cohort:
    slides = generate_cohort(config)
    splits = assign_splits(slides, split_fractions, seed=config.seed)
    return Cohort(
        slides=[
            SlideData(
                grid=s.grid,
                split=splits[s.grid.slide_id],
                annotations=s.annotations,
                store=s.embeddings,
            )
            for s in slides
        ]
    )


def write_cohort(cohort: Cohort, out_dir: str | Path) -> dict[str, Path]:
    """Materialize manifest, annotations, and one embedding store per slide."""
    out_dir = Path(out_dir)
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    annotations = out_dir / "annotations.jsonl"
    storage.write_slide_manifest(
        manifest,
        (
            storage.ManifestEntry(
                slide_id=s.grid.slide_id,
                n_rows=s.grid.n_rows,
                n_cols=s.grid.n_cols,
                label=s.grid.slide_label,
                split=s.split,
                all_tissue=len(s.grid.tissue) == s.grid.n_rows * s.grid.n_cols,
            )
            for s in cohort.slides
        ),
    )
    tissue_path = None
    partial = [
        s for s in cohort.slides if len(s.grid.tissue) != s.grid.n_rows * s.grid.n_cols
    ]
    if partial:
        tissue_path = out_dir / "tissue.jsonl"
        storage.write_tissue_list(
            tissue_path,
            (
                (s.grid.slide_id, r, c)
                for s in partial
                for r, c in sorted(s.grid.tissue)
            ),
        )
    storage.write_annotations(
        annotations, (a for s in cohort.slides for a in s.annotations)
    )
    for s in cohort.slides:
        storage.write_embedding_store(emb_dir / f"{s.grid.slide_id}.bin", s.store)
    paths = {"manifest": manifest, "annotations": annotations, "embeddings": emb_dir}
    if tissue_path:
        paths["tissue"] = tissue_path
    return paths


def load_cohort(
    manifest_path: str | Path,
    annotations_path: str | Path,
    embeddings_dir: str | Path,
    tissue_path: str | Path | None = None,
) -> Cohort:
    entries = storage.read_slide_manifest(manifest_path)
    tissue = storage.read_tissue_list(tissue_path) if tissue_path else None
    grids = storage.grids_from_manifest(entries, tissue)
    annotations = storage.read_annotations(annotations_path)
    slides = []
    for entry in entries:
        store = storage.read_embedding_store(
            Path(embeddings_dir) / f"{entry.slide_id}.bin"
        )
        slides.append(
            SlideData(
                grid=grids[entry.slide_id],
                split=entry.split,
                annotations=annotations.get(entry.slide_id, []),
                store=store,
            )
        )
    return Cohort(slides=slides)


def eligibility_map(
    slides: Sequence[SlideData], threshold: int = VALIDITY_THRESHOLD
) -> dict[str, set[Context]]:
    """Regional contexts at which each slide has at least one usable region."""
    eligibility: dict[str, set[Context]] = {}
    for s in slides:
        contexts = {Context.SLIDE}
        for context in REGIONAL_CONTEXTS:
            if has_usable_region(s.grid, s.annotations, context, threshold):
                contexts.add(context)
        eligibility[s.grid.slide_id] = contexts
    return eligibility


def allocate_split(
    cohort: Cohort,
    split: str,
    alpha: CompositionVector,
    seed: int,
    threshold: int = VALIDITY_THRESHOLD,
) -> dict[str, Context]:
    slides = cohort.by_split(split)
    if not slides:
        raise ValueError(f"no slides in split {split!r}")
    return allocate_contexts(
        [s.grid for s in slides], eligibility_map(slides, threshold), alpha, seed
    )


def bags_for_assignment(
    cohort: Cohort,
    assignment: Mapping[str, Context],
    threshold: int = VALIDITY_THRESHOLD,
) -> list[Bag]:
    bags: list[Bag] = []
    for slide_id, context in assignment.items():
        s = cohort.by_id(slide_id)
        bags.extend(
            build_bags(s.grid, s.store, s.annotations, context, s.split, threshold)
        )
    return bags


def context_bag_sets(
    cohort: Cohort,
    split: str,
    threshold: int = VALIDITY_THRESHOLD,
) -> dict[Context, list[Bag]]:
    """Bags of every slide in the split, at each of the four contexts."""
    sets: dict[Context, list[Bag]] = {c: [] for c in CONTEXT_COLUMNS}
    for s in cohort.by_split(split):
        for context in CONTEXT_COLUMNS:
            sets[context].extend(
                build_bags(s.grid, s.store, s.annotations, context, s.split, threshold)
            )
    return sets


@dataclass
class RunResult:
    alpha: CompositionVector
    params: AbmilParams
    report: TrainReport
    train_assignment: dict[str, Context]
    val_assignment: dict[str, Context]
    matrix: ContextMatrix


def run_alpha(
    cohort: Cohort,
    alpha: CompositionVector,
    config: TrainConfig,
    attention_dim: int = 128,
    threshold: int = VALIDITY_THRESHOLD,
) -> RunResult:
    """Allocate, balance, train, and evaluate one composition vector."""
    train_assignment = allocate_split(
        cohort, "train", alpha, derived_seed(config.seed, _ALLOC_TRAIN_TAG), threshold
    )
    val_assignment = allocate_split(
        cohort, "val", alpha, derived_seed(config.seed, _ALLOC_VAL_TAG), threshold
    )
    train_bags = balance_bags(
        bags_for_assignment(cohort, train_assignment, threshold),
        derived_seed(config.seed, _BALANCE_TAG),
    )
    val_bags = bags_for_assignment(cohort, val_assignment, threshold)
    report = train(train_bags, val_bags, cohort.embed_dim, config, attention_dim)
    matrix = context_matrix(
        report.best_params, context_bag_sets(cohort, "test", threshold), config.tau
    )
    return RunResult(
        alpha=alpha,
        params=report.best_params,
        report=report,
        train_assignment=train_assignment,
        val_assignment=val_assignment,
        matrix=matrix,
    )


def _alpha_dirname(alpha: CompositionVector) -> str:
    m = alpha.as_mapping()
    parts = "_".join(
        f"{round(m[c] * 100):g}"
        for c in (Context.SLIDE, Context.MM4, Context.MM2, Context.MM1)
    )
    return f"alpha_{parts}"


SWEEP_COLUMNS = [
    "alpha",
    "slide_ba",
    "slide_s98",
    "mm4_ba",
    "mm4_s98",
    "mm2_ba",
    "mm2_s98",
    "mm1_ba",
    "mm1_s98",
    "avg_ba",
    "avg_s98",
    "error",
]


def _sweep_worker(args) -> dict[str, str]:
    cohort, alpha, config, attention_dim, threshold, out_dir = args
    label = alpha.label.strip("()")
    row = {col: "" for col in SWEEP_COLUMNS}
    row["alpha"] = label
    try:
        result = run_alpha(cohort, alpha, config, attention_dim, threshold)
    except Exception as exc:  # keep sweeping; the row records the failure
        log.warning("alpha %s failed: %s", label, exc)
        row["error"] = str(exc)
        return row
    for context, prefix in zip(CONTEXT_COLUMNS, ("slide", "mm4", "mm2", "mm1")):
        ba, s98 = result.matrix.entry(context)
        row[f"{prefix}_ba"] = repr(ba)
        row[f"{prefix}_s98"] = repr(s98)
    avg = result.matrix.average
    row["avg_ba"] = repr(avg[0])
    row["avg_s98"] = repr(avg[1])
    if out_dir is not None:
        subdir = Path(out_dir) / _alpha_dirname(alpha)
        subdir.mkdir(parents=True, exist_ok=True)
        save_params(subdir / "checkpoint.pcmw", result.params)
        write_history_csv(subdir / "history.csv", result.report)
        write_matrix_csv(subdir / "metrics.csv", result.matrix)
        storage.write_assignment(subdir / "assignment.jsonl", result.train_assignment)
        storage.write_assignment(
            subdir / "val_assignment.jsonl", result.val_assignment
        )
    return row


def run_sweep(
    cohort: Cohort,
    alphas: Sequence[CompositionVector],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    attention_dim: int = 128,
    threshold: int = VALIDITY_THRESHOLD,
    parallel: int = 1,
) -> list[dict[str, str]]:
    """Train and evaluate every composition vector; rows keep list order."""
    if not alphas:
        raise ValueError("alpha list is empty")
    jobs = [
        (cohort, alpha, config, attention_dim, threshold, out_dir) for alpha in alphas
    ]
    if parallel > 1:
        with multiprocessing.get_context("fork").Pool(parallel) as pool:
            rows = pool.map(_sweep_worker, jobs)
    else:
        rows = [_sweep_worker(job) for job in jobs]
    if out_dir is not None:
        write_sweep_csv(Path(out_dir) / "sweep.csv", rows)
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[Mapping[str, str]]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
