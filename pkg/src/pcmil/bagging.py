"""Region labeling rules and bag construction.

A region is usable only if it carries at least ``threshold`` annotated patches
(default 26). A usable region is Cancer when it has >= threshold annotated
tumor patches; it is NonCancer when it has zero annotated tumor patches and
either at least half of its annotations are normal or every annotation is
stroma. Anything else is ambiguous and produces no bag.

Bag membership is independent of annotations: a bag contains every tissue
patch inside its frame, annotated or not. Only the label comes from the
annotation tallies.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional

import numpy as np

from .geometry import (
    Context,
    RegionFrame,
    SlideGrid,
    partition_regions,
    patch_to_region,
)

ANNOTATION_KINDS = ("tumor", "normal", "stroma")

#: Minimum annotated patches for a usable region; also the tumor-count rule.
VALIDITY_THRESHOLD = 26


@dataclass(frozen=True)
class PatchAnnotation:
    slide_id: str
    row: int
    col: int
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind: {self.kind!r}")


@dataclass(frozen=True)
class RegionStats:
    n_tumor: int
    n_normal: int
    n_stroma: int

    @property
    def n_ann(self) -> int:
        return self.n_tumor + self.n_normal + self.n_stroma


class RegionLabel(Enum):
    CANCER = "cancer"
    NONCANCER = "noncancer"
    AMBIGUOUS = "ambiguous"
    INVALID = "invalid"

    @property
    def is_usable(self) -> bool:
        return self in (RegionLabel.CANCER, RegionLabel.NONCANCER)


@dataclass(eq=False)
class Bag:
    """A labeled set of patch embeddings at one supervision context."""

    slide_id: str
    context: Context
    region: Optional[tuple[int, int]]
    members: tuple[tuple[int, int], ...]
    embeddings: np.ndarray
    label: int
    split: str

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise ValueError("bag must have at least one member")
        if self.embeddings.shape[0] != len(self.members):
            raise ValueError("embedding row count does not match member count")

    @property
    def n_members(self) -> int:
        return len(self.members)


def index_annotations(
    grid: SlideGrid, annotations: Iterable[PatchAnnotation]
) -> dict[tuple[int, int], str]:
    """Map (row, col) -> kind, rejecting duplicates and non-tissue coordinates."""
    indexed: dict[tuple[int, int], str] = {}
    for ann in annotations:
        key = (ann.row, ann.col)
        if key in indexed:
            raise ValueError(f"conflicting annotation at {key} on {grid.slide_id}")
        if key not in grid.tissue:
            raise ValueError(
                f"annotation outside tissue at {key} on {grid.slide_id}"
            )
        indexed[key] = ann.kind
    return indexed


def tally_region(
    annotations: Iterable[PatchAnnotation], frame: RegionFrame
) -> RegionStats:
    """Count annotated patches of each kind inside the frame."""
    seen: set[tuple[int, int]] = set()
    counts = {kind: 0 for kind in ANNOTATION_KINDS}
    for ann in annotations:
        key = (ann.row, ann.col)
        if key in seen:
            raise ValueError(f"conflicting annotation at {key}")
        seen.add(key)
        if frame.contains(ann.row, ann.col):
            counts[ann.kind] += 1
    return RegionStats(counts["tumor"], counts["normal"], counts["stroma"])


def classify_region(stats: RegionStats, threshold: int = VALIDITY_THRESHOLD) -> RegionLabel:
    """Apply the validity and labeling rules to a region's annotation tallies."""
    if stats.n_ann < threshold:
        return RegionLabel.INVALID
    if stats.n_tumor >= threshold:
        return RegionLabel.CANCER
    if stats.n_tumor == 0 and (
        2 * stats.n_normal >= stats.n_ann or stats.n_stroma == stats.n_ann
    ):
        return RegionLabel.NONCANCER
    return RegionLabel.AMBIGUOUS


def region_label_map(
    grid: SlideGrid,
    annotations: Iterable[PatchAnnotation],
    context: Context,
    threshold: int = VALIDITY_THRESHOLD,
) -> dict[tuple[int, int], RegionLabel]:
    """Label every frame of the regional partition."""
    indexed = index_annotations(grid, annotations)
    counts: dict[tuple[int, int], dict[str, int]] = {}
    for (row, col), kind in indexed.items():
        key = patch_to_region(row, col, context)
        counts.setdefault(key, {k: 0 for k in ANNOTATION_KINDS})[kind] += 1
    labels = {}
    for frame in partition_regions(grid, context):
        c = counts.get(frame.key, {k: 0 for k in ANNOTATION_KINDS})
        stats = RegionStats(c["tumor"], c["normal"], c["stroma"])
        labels[frame.key] = classify_region(stats, threshold)
    return labels


def has_usable_region(
    grid: SlideGrid,
    annotations: Iterable[PatchAnnotation],
    context: Context,
    threshold: int = VALIDITY_THRESHOLD,
) -> bool:
    return any(
        label.is_usable
        for label in region_label_map(grid, annotations, context, threshold).values()
    )


def _stack_embeddings(store, members: Iterable[tuple[int, int]]) -> np.ndarray:
    return np.stack([store.get(row, col) for row, col in members])


def build_bags(
    grid: SlideGrid,
    store,
    annotations: Iterable[PatchAnnotation],
    context: Context,
    split: str = "train",
    threshold: int = VALIDITY_THRESHOLD,
) -> list[Bag]:
    """Construct the slide bag or all usable regional bags for one slide.

    ``store`` must resolve every tissue patch; a gap raises immediately rather
    than producing a short bag.
    """
    missing = [p for p in grid.tissue if p not in store]
    if missing:
        raise ValueError(
            f"missing embedding for patch {min(missing)} on {grid.slide_id}"
        )
    sorted_tissue = sorted(grid.tissue)
    if context is Context.SLIDE:
        members = tuple(sorted_tissue)
        return [
            Bag(
                slide_id=grid.slide_id,
                context=context,
                region=None,
                members=members,
                embeddings=_stack_embeddings(store, members),
                label=grid.slide_label,
                split=split,
            )
        ]
    labels = region_label_map(grid, annotations, context, threshold)
    by_region: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for row, col in sorted_tissue:
        by_region.setdefault(patch_to_region(row, col, context), []).append((row, col))
    bags = []
    for frame in partition_regions(grid, context):
        label = labels[frame.key]
        if not label.is_usable:
            continue
        members = tuple(by_region.get(frame.key, ()))
        if not members:
            continue
        bags.append(
            Bag(
                slide_id=grid.slide_id,
                context=context,
                region=frame.key,
                members=members,
                embeddings=_stack_embeddings(store, members),
                label=1 if label is RegionLabel.CANCER else 0,
                split=split,
            )
        )
    return bags
