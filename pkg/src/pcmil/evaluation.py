"""Threshold and operating-point metrics, the train-context x test-context
matrix, regional agreement against exhaustive 2mm truth, and heatmap export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bagging import Bag, build_bags
from .geometry import (
    Context,
    SlideGrid,
    partition_regions,
    patch_to_region,
    region_grid_shape,
)
from .model import AbmilParams, forward

CONTEXT_COLUMNS = (Context.SLIDE, Context.MM4, Context.MM2, Context.MM1)


@dataclass(frozen=True)
class ScoredSet:
    """Parallel score and binary label sequences."""

    scores: tuple[float, ...]
    labels: tuple[int, ...]

    def __init__(self, scores: Sequence[float], labels: Sequence[int]) -> None:
        scores = tuple(float(s) for s in scores)
        labels = tuple(int(y) for y in labels)
        if len(scores) != len(labels) or not scores:
            raise ValueError("scores and labels must be nonempty and equal length")
        if any(y not in (0, 1) for y in labels):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)


def _split_scores(scored: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scored.scores)
    labels = np.asarray(scored.labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced accuracy undefined: needs both labels")
    return pos, neg


def balanced_accuracy(scored: ScoredSet, tau: float) -> float:
    """100 * (sensitivity + specificity) / 2 with predictions score >= tau."""
    pos, neg = _split_scores(scored)
    sensitivity = np.mean(pos >= tau)
    specificity = np.mean(neg < tau)
    return float(100.0 * (sensitivity + specificity) / 2.0)


def spec_at_sens(scored: ScoredSet, target_sens: float = 0.98) -> float:
    """Best achievable specificity (percent) at sensitivity >= target.

    Operating points are the achievable ones: thresholds at the distinct
    score values with the inclusive rule score >= t. No interpolation.
    """
    pos, neg = _split_scores(scored)
    best = 0.0
    feasible = False
    for t in sorted(set(scored.scores), reverse=True):
        sens = np.mean(pos >= t)
        if sens >= target_sens:
            feasible = True
            best = max(best, float(np.mean(neg < t)))
    if not feasible:  # unreachable for target <= 1: the lowest score admits all
        raise ValueError("no operating point reaches the target sensitivity")
    return 100.0 * best


def score_bags(params: AbmilParams, bags: Sequence[Bag]) -> ScoredSet:
    return ScoredSet(
        [forward(params, bag).p_hat for bag in bags], [bag.label for bag in bags]
    )


def evaluate_context(
    params: AbmilParams, bags: Sequence[Bag], tau: float = 0.5
) -> tuple[float, float]:
    """(balanced accuracy, specificity at 98 percent sensitivity), both percent."""
    scored = score_bags(params, bags)
    return balanced_accuracy(scored, tau), spec_at_sens(scored)


@dataclass(frozen=True)
class ContextMatrix:
    """Per-context (B-A, S@98) pairs plus their mean, one table row."""

    entries: tuple[tuple[float, float], ...]  # ordered as CONTEXT_COLUMNS

    def __post_init__(self) -> None:
        if len(self.entries) != 4:
            raise ValueError("expected entries for all four contexts")

    def entry(self, context: Context) -> tuple[float, float]:
        return self.entries[CONTEXT_COLUMNS.index(context)]

    @property
    def average(self) -> tuple[float, float]:
        ba = sum(e[0] for e in self.entries) / 4.0
        s98 = sum(e[1] for e in self.entries) / 4.0
        return (ba, s98)


def context_matrix(
    params: AbmilParams,
    test_sets: Mapping[Context, Sequence[Bag]],
    tau: float = 0.5,
) -> ContextMatrix:
    entries = []
    for context in CONTEXT_COLUMNS:
        bags = test_sets.get(context)
        if not bags:
            raise ValueError(f"no test bags for context {context.token}")
        entries.append(evaluate_context(params, bags, tau))
    return ContextMatrix(entries=tuple(entries))


def write_matrix_csv(path: str | Path, matrix: ContextMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["context", "ba", "s_at_98"])
        for context, (ba, s98) in zip(CONTEXT_COLUMNS, matrix.entries):
            writer.writerow([context.token, repr(ba), repr(s98)])
        avg = matrix.average
        writer.writerow(["average", repr(avg[0]), repr(avg[1])])


def read_matrix_csv(path: str | Path) -> ContextMatrix:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["context", "ba", "s_at_98"]:
        raise ValueError(f"{path}: not a context matrix CSV")
    values = {row[0]: (float(row[1]), float(row[2])) for row in rows[1:]}
    return ContextMatrix(
        entries=tuple(values[context.token] for context in CONTEXT_COLUMNS)
    )


def regional_agreement(
    params: AbmilParams,
    grid: SlideGrid,
    store,
    truth: Mapping[tuple[int, int], int],
    tau: float = 0.5,
) -> float:
    """Percent of truth-labeled 2mm regions whose thresholded prediction
    matches, with inference run over every tissue-bearing region."""
    if not truth:
        raise ValueError("truth map is empty")
    shape = region_grid_shape(grid.n_rows, grid.n_cols, Context.MM2)
    for key in truth:
        if not (0 <= key[0] < shape[0] and 0 <= key[1] < shape[1]):
            raise ValueError(f"truth region {key} outside grid")
    probs = _region_probabilities(params, grid, store)
    matches = 0
    for key, label in truth.items():
        if key not in probs:
            raise ValueError(f"truth region {key} has no tissue")
        matches += int(int(probs[key] >= tau) == int(label))
    return 100.0 * matches / len(truth)


def _region_probabilities(
    params: AbmilParams, grid: SlideGrid, store
) -> dict[tuple[int, int], float]:
    by_region: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for row, col in sorted(grid.tissue):
        by_region.setdefault(patch_to_region(row, col, Context.MM2), []).append(
            (row, col)
        )
    probs = {}
    for key, members in by_region.items():
        F = np.stack([store.get(r, c) for r, c in members])
        probs[key] = forward(params, F).p_hat
    return probs


def _write_matrix_txt(path: Path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(" ".join(format(v, ".10g") for v in row) + "\n")


def export_heatmap(
    params: AbmilParams,
    grid: SlideGrid,
    store,
    out_dir: str | Path,
    binarize_threshold: float = 0.9,
) -> dict[str, Path]:
    """Write three text matrices with JSON sidecars.

    ``attention``: slide-bag attention per patch, scaled to [0, 1] by its max.
    ``region_prob``: 2mm region probabilities. ``region_bin``: the binarized
    version of region_prob, meant for visualization only.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = sorted(grid.tissue)
    F = np.stack([store.get(r, c) for r, c in members])
    attention = forward(params, F).attention
    att_map = np.zeros((grid.n_rows, grid.n_cols))
    for (row, col), a in zip(members, attention):
        att_map[row, col] = a
    att_map = att_map / att_map.max()

    shape = region_grid_shape(grid.n_rows, grid.n_cols, Context.MM2)
    prob_map = np.full(shape, np.nan)
    for key, p in _region_probabilities(params, grid, store).items():
        prob_map[key] = p
    bin_map = np.where(
        np.isnan(prob_map), np.nan, (prob_map >= binarize_threshold).astype(float)
    )

    paths = {}
    layers = {
        "attention": (att_map, (grid.n_rows, grid.n_cols)),
        "region_prob": (prob_map, shape),
        "region_bin": (bin_map, shape),
    }
    for kind, (matrix, (rows, cols)) in layers.items():
        txt = out_dir / f"{grid.slide_id}_{kind}.txt"
        _write_matrix_txt(txt, matrix)
        sidecar = out_dir / f"{grid.slide_id}_{kind}.json"
        sidecar.write_text(
            json.dumps(
                {"id": grid.slide_id, "rows": rows, "cols": cols, "kind": kind},
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        paths[kind] = txt
    return paths
