"""Context allocation and class balancing.

Each training slide supervises exactly one context. Quotas come from
largest-remainder rounding of the composition vector; the finest contexts
draw their slides first so regional quotas are filled before the slide pool
absorbs the rest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bagging import Bag
from .geometry import GRANULARITY_ORDER, Context, SlideGrid

log = logging.getLogger(__name__)

_ALPHA_TOL = 1e-9


@dataclass(frozen=True)
class CompositionVector:
    """Fractions of training slides assigned to each supervision context."""

    alpha_slide: float
    alpha_4: float
    alpha_2: float
    alpha_1: float

    def __post_init__(self) -> None:
        values = self.as_mapping().values()
        if any(a < 0 for a in values):
            raise ValueError("composition fractions must be nonnegative")
        if abs(sum(values) - 1.0) > _ALPHA_TOL:
            raise ValueError(f"composition fractions sum to {sum(values)}, not 1")

    def as_mapping(self) -> dict[Context, float]:
        return {
            Context.SLIDE: self.alpha_slide,
            Context.MM4: self.alpha_4,
            Context.MM2: self.alpha_2,
            Context.MM1: self.alpha_1,
        }

    @classmethod
    def from_percents(cls, percents: Sequence[int]) -> "CompositionVector":
        if len(percents) != 4:
            raise ValueError("expected four percentages (slide, 4mm, 2mm, 1mm)")
        if sum(percents) != 100:
            raise ValueError(f"percentages sum to {sum(percents)}, not 100")
        s, a4, a2, a1 = (p / 100 for p in percents)
        return cls(s, a4, a2, a1)

    @property
    def label(self) -> str:
        m = self.as_mapping()
        parts = [f"{round(m[c] * 100):g}" for c in (Context.SLIDE, Context.MM4, Context.MM2, Context.MM1)]
        return "(" + ",".join(parts) + ")"


def quota(alpha: CompositionVector, n_slides: int) -> dict[Context, int]:
    """Largest-remainder rounding of alpha * n_slides; ties favor finer contexts."""
    if n_slides < 1:
        raise ValueError("n_slides must be >= 1")
    mapping = alpha.as_mapping()
    counts = {}
    remainders = []
    for rank, context in enumerate(GRANULARITY_ORDER):
        exact = mapping[context] * n_slides
        counts[context] = int(np.floor(exact))
        remainders.append((-(exact - counts[context]), rank, context))
    leftover = n_slides - sum(counts.values())
    # Finer contexts come earlier in GRANULARITY_ORDER, so rank breaks ties.
    for _, _, context in sorted(remainders)[:leftover]:
        counts[context] += 1
    return counts


def allocate_contexts(
    slides: Sequence[SlideGrid],
    eligibility: Mapping[str, set[Context]],
    alpha: CompositionVector,
    seed: int,
) -> dict[str, Context]:
    """Assign each slide to exactly one context.

    Quotas are filled finest first by uniform draws without replacement from
    the still-unassigned eligible slides. A quota that cannot be filled spills
    over to the next coarser context. Every slide is eligible for the slide
    context, so the assignment always covers all slides.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    quotas = quota(alpha, len(slides))
    assignment: dict[str, Context] = {}
    shortfall = 0
    for context in GRANULARITY_ORDER[:-1]:
        want = quotas[context] + shortfall
        shortfall = 0
        pool = [
            g.slide_id
            for g in slides
            if g.slide_id not in assignment
            and context in eligibility.get(g.slide_id, set())
        ]
        take = min(want, len(pool))
        if take < want:
            shortfall = want - take
            log.warning(
                "context %s quota short by %d slide(s); reassigning to coarser context",
                context.token,
                shortfall,
            )
        if take > 0:
            chosen = rng.choice(len(pool), size=take, replace=False)
            for idx in chosen:
                assignment[pool[idx]] = context
    for g in slides:
        if g.slide_id not in assignment:
            assignment[g.slide_id] = Context.SLIDE
    return assignment


def balance_bags(bags: Sequence[Bag], seed: int) -> list[Bag]:
    """Undersample the majority label within each context partition.

    The minority count is matched exactly by a seeded draw without
    replacement; retained bags keep their original relative order. A
    partition missing one label entirely is dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    contexts = sorted({bag.context for bag in bags})
    keep: set[int] = set()
    for context in contexts:
        pos = [i for i, b in enumerate(bags) if b.context == context and b.label == 1]
        neg = [i for i, b in enumerate(bags) if b.context == context and b.label == 0]
        if not pos or not neg:
            log.warning(
                "dropping %s partition: no %s bags",
                context.token,
                "cancer" if not pos else "non-cancer",
            )
            continue
        k = min(len(pos), len(neg))
        for group in (pos, neg):
            if len(group) > k:
                chosen = rng.choice(len(group), size=k, replace=False)
                keep.update(group[i] for i in chosen)
            else:
                keep.update(group)
    return [bag for i, bag in enumerate(bags) if i in keep]
