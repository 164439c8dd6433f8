"""Post-hoc alignment baseline: train with cross-entropy only, then move each
frozen target feature to the transport-weighted barycenter of the frozen
source features and classify the moved points with the frozen head.
"""

from __future__ import annotations

import numpy as np

from .data_gen import DomainDataset
from .errors import ContractViolationError, NumericError
from .eval_report import accuracy
from .nn_core import ModelParams, forward_classifier, forward_features
from .ot_core import (
    EUCLIDEAN,
    DiscreteDistribution,
    SinkhornConfig,
    TransportPlan,
    cost_matrix,
    sinkhorn,
)
from dataclasses import dataclass

DEFAULT_EPSILON = 2.0
MAX_SOURCE_ROWS = 2048


@dataclass
class AlignmentResult:
    aligned_features: np.ndarray
    plan: TransportPlan
    pre_accuracy: float
    post_accuracy: float

    def __post_init__(self):
        for acc in (self.pre_accuracy, self.post_accuracy):
            if not (0.0 <= acc <= 1.0):
                raise ContractViolationError("accuracies must lie in [0, 1]")


def barycentric_map(
    source_features: np.ndarray,
    target_features: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    metric: str = EUCLIDEAN,
    max_iterations: int = 1000,
    marginal_tolerance: float = 1e-6,
) -> tuple:
    """Map target features into the convex hull of the source features.

    Solves entropic transport from the target points (rows of the plan) to
    the source points with uniform weights and absolute regularization
    epsilon, then replaces each target row by its transported-mass-weighted
    average of source rows. Returns (aligned_features, plan).
    """
    src = np.asarray(source_features, dtype=float)
    tgt = np.asarray(target_features, dtype=float)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ContractViolationError(
            f"feature widths must match, got {src.shape} and {tgt.shape}"
        )
    if not epsilon > 0:
        raise ContractViolationError("epsilon must be positive")
    target_measure = DiscreteDistribution.uniform(tgt)
    source_measure = DiscreteDistribution.uniform(src)
    cost = cost_matrix(target_measure, source_measure, metric)
    config = SinkhornConfig(
        epsilon=epsilon,
        relative_epsilon=False,
        max_iterations=max_iterations,
        marginal_tolerance=marginal_tolerance,
        log_domain=True,
    )
    plan = sinkhorn(cost, target_measure, source_measure, config)
    row_mass = plan.gamma.sum(axis=1)
    if np.any(row_mass <= 0):
        raise NumericError("degenerate transport row with zero mass; plan is not feasible")
    aligned = (plan.gamma @ src) / row_mass[:, None]
    return aligned, plan


def evaluate_posthoc(
    dataset: DomainDataset,
    erm_params: ModelParams,
    epsilon: float = DEFAULT_EPSILON,
    metric: str = EUCLIDEAN,
    max_source_rows: int = MAX_SOURCE_ROWS,
    subsample_seed: int = 0,
) -> dict:
    """Align val and test features onto the training features of a frozen
    erm model and report accuracy before and after alignment per split.

    The source side is capped at max_source_rows rows (seeded subsample) to
    bound the transport problem. Returns {"val": AlignmentResult, "test": ...}.
    """
    x_train, _ = dataset.split_arrays("train")
    source_features, _ = forward_features(erm_params, x_train)
    if source_features.shape[0] > max_source_rows:
        rng = np.random.default_rng([int(subsample_seed), 3])
        keep = rng.permutation(source_features.shape[0])[:max_source_rows]
        source_features = source_features[np.sort(keep)]

    results = {}
    for split in ("val", "test"):
        x_split, y_split = dataset.split_arrays(split)
        target_features, _ = forward_features(erm_params, x_split)
        pre = accuracy(forward_classifier(erm_params, target_features), y_split)
        aligned, plan = barycentric_map(source_features, target_features, epsilon, metric)
        post = accuracy(forward_classifier(erm_params, aligned), y_split)
        results[split] = AlignmentResult(aligned, plan, pre, post)
    return results


def posthoc_summary(results: dict) -> dict:
    return {
        split: {"pre_accuracy": r.pre_accuracy, "post_accuracy": r.post_accuracy}
        for split, r in results.items()
    }
