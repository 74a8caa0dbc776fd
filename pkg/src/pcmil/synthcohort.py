"""Synthetic planted-lesion cohorts with full ground truth.

Each slide is an all-tissue grid. Positive slides carry one to three
rectangular tumor lesions; the rest of the tissue is normal with rectangular
stroma clumps covering the requested fraction. Patch embeddings are
class-conditional isotropic Gaussians.

The stroma mean deliberately sits closer to the tumor mean than to the normal
mean. Both classes receive the same stroma fraction, so slide labels alone
carry no signal about where stroma belongs relative to the decision boundary;
only region-level labels (where tumor-free stroma is explicitly negative) pin
it down. This is what makes supervision scale matter on synthetic data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bagging import PatchAnnotation
from .geometry import Context, SlideGrid, full_tissue, region_grid_shape, region_side_patches
from .storage import EmbeddingStore

#: Angle (degrees) of the stroma mean between the tumor axis and normal axis.
STROMA_ANGLE_DEG = 35.0

_ORACLE_THRESHOLD = 26


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int = 60
    grid_rows: int = 32
    grid_cols: int = 32
    d: int = 16
    lesion_rate: float = 0.5
    lesion_side_range: tuple[int, int] = (8, 16)
    delta: float = 4.0
    sigma: float = 1.0
    stroma_fraction: float = 0.3
    annotation_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("lesion_rate", "stroma_fraction", "annotation_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.lesion_side_range
        if lo < 1 or lo > hi:
            raise ValueError("lesion_side_range must be a nonempty positive interval")
        if hi > min(self.grid_rows, self.grid_cols):
            raise ValueError("lesion cannot fit grid")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.d < 2:
            raise ValueError("embedding dim must be >= 2")
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")


@dataclass
class SynthSlide:
    grid: SlideGrid
    truth: dict[tuple[int, int], str]
    annotations: list[PatchAnnotation]
    embeddings: EmbeddingStore


def class_means(d: int, delta: float) -> dict[str, np.ndarray]:
    """Fixed unit directions scaled so the tumor and normal means sit
    ``delta`` apart; the stroma mean lies between them, nearer tumor."""
    scale = delta / math.sqrt(2.0)
    theta = math.radians(STROMA_ANGLE_DEG)
    mu = {
        "tumor": np.zeros(d),
        "normal": np.zeros(d),
        "stroma": np.zeros(d),
    }
    mu["tumor"][0] = scale
    mu["normal"][1] = scale
    mu["stroma"][0] = scale * math.cos(theta)
    mu["stroma"][1] = scale * math.sin(theta)
    return mu


def _slide_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _plant_rectangles(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    side_range: tuple[int, int],
    count: int,
) -> set[tuple[int, int]]:
    cells: set[tuple[int, int]] = set()
    lo, hi = side_range
    for _ in range(count):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, rows - h + 1))
        c0 = int(rng.integers(0, cols - w + 1))
        cells.update((r, c) for r in range(r0, r0 + h) for c in range(c0, c0 + w))
    return cells


def _generate_slide(index: int, positive: bool, config: SynthConfig) -> SynthSlide:
    rng = _slide_rng(config.seed, index)
    rows, cols = config.grid_rows, config.grid_cols
    n_patches = rows * cols

    tumor: set[tuple[int, int]] = set()
    if positive:
        n_lesions = int(rng.integers(1, 4))
        tumor = _plant_rectangles(rng, rows, cols, config.lesion_side_range, n_lesions)

    # Stroma forms lesion-scale clumps; clip the last clump so the total
    # matches the requested fraction of non-tumor tissue.
    non_tumor = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in tumor]
    target = round(config.stroma_fraction * len(non_tumor))
    stroma: set[tuple[int, int]] = set()
    while len(stroma) < target:
        clump = _plant_rectangles(rng, rows, cols, config.lesion_side_range, 1)
        for cell in sorted(clump):
            if cell in tumor or cell in stroma:
                continue
            stroma.add(cell)
            if len(stroma) >= target:
                break

    truth = {}
    for r in range(rows):
        for c in range(cols):
            if (r, c) in tumor:
                truth[(r, c)] = "tumor"
            elif (r, c) in stroma:
                truth[(r, c)] = "stroma"
            else:
                truth[(r, c)] = "normal"

    slide_id = f"synth{index:04d}"
    grid = SlideGrid(
        slide_id=slide_id,
        n_rows=rows,
        n_cols=cols,
        tissue=full_tissue(rows, cols),
        slide_label=1 if tumor else 0,
    )

    mu = class_means(config.d, config.delta)
    noise = rng.standard_normal((n_patches, config.d)) * config.sigma
    store = EmbeddingStore(dim=config.d)
    ordered = [(r, c) for r in range(rows) for c in range(cols)]
    for (r, c), eps in zip(ordered, noise):
        store.vectors[(r, c)] = (mu[truth[(r, c)]] + eps).astype(np.float32)

    n_ann = round(config.annotation_fraction * n_patches)
    chosen = rng.choice(n_patches, size=n_ann, replace=False)
    annotations = [
        PatchAnnotation(slide_id, *ordered[i], kind=truth[ordered[i]])
        for i in sorted(int(i) for i in chosen)
    ]
    return SynthSlide(grid=grid, truth=truth, annotations=annotations, embeddings=store)


def generate_cohort(config: SynthConfig) -> list[SynthSlide]:
    """Deterministic cohort; slide i depends only on (seed, i) and the
    cohort-level positivity draw."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    n_pos = round(config.lesion_rate * config.n_slides)
    positive = np.zeros(config.n_slides, dtype=bool)
    positive[rng.permutation(config.n_slides)[:n_pos]] = True
    return [
        _generate_slide(i, bool(positive[i]), config) for i in range(config.n_slides)
    ]


def assign_splits(
    slides: Sequence[SynthSlide],
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> dict[str, str]:
    """Stratified train/val/test split by slide label."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    splits: dict[str, str] = {}
    for label in (0, 1):
        ids = [s.grid.slide_id for s in slides if s.grid.slide_label == label]
        order = rng.permutation(len(ids))
        n_train = round(fractions[0] * len(ids))
        n_val = round(fractions[1] * len(ids))
        for pos, idx in enumerate(order):
            if pos < n_train:
                splits[ids[idx]] = "train"
            elif pos < n_train + n_val:
                splits[ids[idx]] = "val"
            else:
                splits[ids[idx]] = "test"
    return splits


def brute_force_region_labels(
    n_rows: int,
    n_cols: int,
    annotations: Iterable[PatchAnnotation],
    context: Context,
) -> dict[tuple[int, int], str]:
    """Independent scan-the-patches reimplementation of the labeling rules.

    Deliberately bypasses the production partition and tally code so the two
    paths can be cross-checked. Returns labels as plain strings.
    """
    side = region_side_patches(context)
    counts: dict[tuple[int, int], dict[str, int]] = {}
    for ann in annotations:
        key = (ann.row // side, ann.col // side)
        counts.setdefault(key, {"tumor": 0, "normal": 0, "stroma": 0})[ann.kind] += 1
    labels = {}
    for rr in range(math.ceil(n_rows / side)):
        for rc in range(math.ceil(n_cols / side)):
            c = counts.get((rr, rc), {"tumor": 0, "normal": 0, "stroma": 0})
            total = c["tumor"] + c["normal"] + c["stroma"]
            if total < _ORACLE_THRESHOLD:
                labels[(rr, rc)] = "invalid"
            elif c["tumor"] >= _ORACLE_THRESHOLD:
                labels[(rr, rc)] = "cancer"
            elif c["tumor"] == 0 and (
                c["normal"] / total >= 0.5 or c["stroma"] == total
            ):
                labels[(rr, rc)] = "noncancer"
            else:
                labels[(rr, rc)] = "ambiguous"
    return labels


def oracle_region_labels(
    slide: SynthSlide, context: Context
) -> dict[tuple[int, int], str]:
    """Labels from the slide's sparse annotations, via the brute-force path."""
    return brute_force_region_labels(
        slide.grid.n_rows, slide.grid.n_cols, slide.annotations, context
    )


def oracle_truth_region_labels(
    slide: SynthSlide, context: Context
) -> dict[tuple[int, int], int]:
    """Exhaustive regional ground truth from the full (latent) patch labels.

    A region is positive with at least 26 true tumor patches and negative
    when tumor-free; anything in between is left out of the map.
    """
    side = region_side_patches(context)
    shape = region_grid_shape(slide.grid.n_rows, slide.grid.n_cols, context)
    tumor_counts = np.zeros(shape, dtype=int)
    for (row, col), kind in slide.truth.items():
        if kind == "tumor":
            tumor_counts[row // side, col // side] += 1
    labels = {}
    for rr in range(shape[0]):
        for rc in range(shape[1]):
            count = tumor_counts[rr, rc]
            if count >= _ORACLE_THRESHOLD:
                labels[(rr, rc)] = 1
            elif count == 0:
                labels[(rr, rc)] = 0
    return labels
