"""Self-training for 3D lesion box detection under label shift.

A numpy library plus CLI that pairs a transparent simulated detector with
synthetic cross-domain cohorts to study (and test) label-shift-aware
self-training: anchor-shape adaptation, prior-guided pseudo-label selection
with per-subject budgets and bin quotas, and a full AP/FROC evaluation suite.
"""

__version__ = "0.1.0"

from .anchors import AnchorSet, EmaConfig, anchor_coverage, ema_update_anchors, kmeans_shapes
from .config import ConfigError, RunConfig, config_digest, load_config, parse_config_text
from .geometry import BinningConfig, Box3, Spacing, bin_of, iou, shape_of, volume_cc
from .loop import (
    ExperimentData,
    ExperimentResult,
    RoundRecord,
    lambda_at,
    prepare_data,
    run_experiment,
    run_round,
)
from .matching import (
    Detection,
    FrocCurve,
    MatchResult,
    average_precision,
    froc,
    match_greedy,
    nms3d,
    pr_curve,
    sensitivity_at,
)
from .priors import (
    PriorState,
    Quota,
    allocate_quota,
    budget,
    total_variation,
    update_hist,
    update_mu,
)
from .selection import (
    PseudoLabelSet,
    candidate_set,
    select_fixed_threshold,
    select_prior_guided,
    select_top_p,
)
from .simulate import (
    CohortSpec,
    SimDetector,
    Subject,
    fdg_like,
    generate_cohort,
    infer,
    new_detector,
    psma_like,
    source_pretrain,
    train_update,
)

__all__ = [
    "__version__",
    "AnchorSet", "EmaConfig", "anchor_coverage", "ema_update_anchors", "kmeans_shapes",
    "ConfigError", "RunConfig", "config_digest", "load_config", "parse_config_text",
    "BinningConfig", "Box3", "Spacing", "bin_of", "iou", "shape_of", "volume_cc",
    "ExperimentData", "ExperimentResult", "RoundRecord", "lambda_at", "prepare_data",
    "run_experiment", "run_round",
    "Detection", "FrocCurve", "MatchResult", "average_precision", "froc", "match_greedy",
    "nms3d", "pr_curve", "sensitivity_at",
    "PriorState", "Quota", "allocate_quota", "budget", "total_variation", "update_hist",
    "update_mu",
    "PseudoLabelSet", "candidate_set", "select_fixed_threshold", "select_prior_guided",
    "select_top_p",
    "CohortSpec", "SimDetector", "Subject", "fdg_like", "generate_cohort", "infer",
    "new_detector", "psma_like", "source_pretrain", "train_update",
]
