"""Patch-lattice geometry: the fixed tiling of a slide and its partition into
non-overlapping millimeter-scale square regions.

All coordinates are (row, col) patch indices on a lattice of 256 px patches at
20x magnification. Region sides are defined in patch units, so the nominal
"1 mm" region is exactly 1.024 mm of tissue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

# 256 px per patch at 0.5 um/px.
PATCH_SIDE_MM = Fraction(128, 1000)


class Context(IntEnum):
    """Supervision contexts, ordered finest to coarsest."""

    MM1 = 1
    MM2 = 2
    MM4 = 3
    SLIDE = 4

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @property
    def is_regional(self) -> bool:
        return self is not Context.SLIDE


_TOKENS = {
    Context.MM1: "1mm",
    Context.MM2: "2mm",
    Context.MM4: "4mm",
    Context.SLIDE: "slide",
}
_FROM_TOKEN = {v: k for k, v in _TOKENS.items()}

REGIONAL_CONTEXTS = (Context.MM1, Context.MM2, Context.MM4)
#: Finest-first allocation order.
GRANULARITY_ORDER = (Context.MM1, Context.MM2, Context.MM4, Context.SLIDE)

_REGION_SIDE = {Context.MM1: 8, Context.MM2: 16, Context.MM4: 32}


def parse_context(token: str) -> Context:
    try:
        return _FROM_TOKEN[token]
    except KeyError:
        raise ValueError(f"unknown context token: {token!r}") from None


def region_side_patches(context: Context) -> int:
    """Side length of a square region in patches (8, 16 or 32)."""
    if context is Context.SLIDE:
        raise ValueError("slide context has no regional side")
    return _REGION_SIDE[context]


def region_area_mm2(context: Context) -> Fraction:
    """Exact physical area of a full region.

    Equals the nominal 1/4/16 mm2 scaled by (1.024)^2, since region sides are
    defined in patch units.
    """
    side = region_side_patches(context) * PATCH_SIDE_MM
    return side * side


@dataclass(frozen=True)
class SlideGrid:
    """A slide's patch lattice and its tissue-patch set."""

    slide_id: str
    n_rows: int
    n_cols: int
    tissue: frozenset[tuple[int, int]]
    slide_label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tissue", frozenset(self.tissue))
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and column")
        if not self.tissue:
            raise ValueError("tissue set is empty")
        for row, col in self.tissue:
            if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
                raise ValueError(
                    f"tissue patch ({row},{col}) outside {self.n_rows}x{self.n_cols} grid"
                )
        if self.slide_label not in (0, 1):
            raise ValueError("slide_label must be 0 or 1")


def full_tissue(n_rows: int, n_cols: int) -> frozenset[tuple[int, int]]:
    """Tissue set covering every patch of the grid."""
    return frozenset((r, c) for r in range(n_rows) for c in range(n_cols))


@dataclass(frozen=True)
class RegionFrame:
    """One tile of the regional partition; boundary frames may be partial."""

    context: Context
    region_row: int
    region_col: int
    patch_rows: range
    patch_cols: range

    def contains(self, row: int, col: int) -> bool:
        return row in self.patch_rows and col in self.patch_cols

    @property
    def n_cells(self) -> int:
        return len(self.patch_rows) * len(self.patch_cols)

    @property
    def key(self) -> tuple[int, int]:
        return (self.region_row, self.region_col)


def region_grid_shape(n_rows: int, n_cols: int, context: Context) -> tuple[int, int]:
    """Number of region rows and columns covering the grid."""
    side = region_side_patches(context)
    return (math.ceil(n_rows / side), math.ceil(n_cols / side))


def partition_regions(grid: SlideGrid, context: Context) -> list[RegionFrame]:
    """Tile the grid with non-overlapping square frames, row-major from (0,0)."""
    side = region_side_patches(context)
    n_rr, n_rc = region_grid_shape(grid.n_rows, grid.n_cols, context)
    frames = []
    for rr in range(n_rr):
        for rc in range(n_rc):
            r0, c0 = rr * side, rc * side
            frames.append(
                RegionFrame(
                    context=context,
                    region_row=rr,
                    region_col=rc,
                    patch_rows=range(r0, min(r0 + side, grid.n_rows)),
                    patch_cols=range(c0, min(c0 + side, grid.n_cols)),
                )
            )
    return frames


def patch_to_region(row: int, col: int, context: Context) -> tuple[int, int]:
    """Region coordinates of the frame containing patch (row, col)."""
    side = region_side_patches(context)
    return (row // side, col // side)
