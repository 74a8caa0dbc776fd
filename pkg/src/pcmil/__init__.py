"""Progressive-context multiple instance learning on whole-slide patch grids.

Millimeter-scale regional bags are built from sparse patch annotations, each
training slide supervises exactly one anatomical scale per a composition
vector, and a gated-attention bag classifier is trained with per-bag BCE and
evaluated across inference contexts.
"""

from .allocation import CompositionVector, allocate_contexts, balance_bags, quota
from .bagging import (
    Bag,
    PatchAnnotation,
    RegionLabel,
    RegionStats,
    build_bags,
    classify_region,
    tally_region,
)
from .geometry import (
    Context,
    RegionFrame,
    SlideGrid,
    partition_regions,
    patch_to_region,
    region_side_patches,
)
from .model import AbmilParams, BagScore, backward, forward, init_params, predict
from .training import TrainConfig, TrainReport, adamw_step, bce_loss, train
from .evaluation import (
    ContextMatrix,
    ScoredSet,
    balanced_accuracy,
    context_matrix,
    evaluate_context,
    export_heatmap,
    regional_agreement,
    spec_at_sens,
)
from .synthcohort import SynthConfig, SynthSlide, generate_cohort

__version__ = "0.1.0"
