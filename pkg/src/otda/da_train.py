"""Training harness: plain source-risk minimization (erm), transport-
regularized training (ot), and a gradient-reversal adversary baseline (dann),
plus the alpha sweep and multi-seed aggregation used by the experiment CLI.

Target batches always come from the validation institution's inputs; its
labels are never part of any loss. All randomness flows from the run seed
through dedicated generator streams, so a (dataset, config) pair fully
determines the trajectory, and every method consumes the streams identically
(an alpha of zero reproduces erm bit for bit).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data_gen import DomainDataset
from .errors import ConfigurationError, ContractViolationError
from .eval_report import accuracy, roc_auc
from .nn_core import (
    ModelGrads,
    ModelParams,
    OptimizerConfig,
    _head_backward,
    _head_forward,
    backward,
    cross_entropy,
    forward_classifier,
    forward_features,
    init_model,
    sgd_step,
)
from .ot_core import EUCLIDEAN, SQUARED_EUCLIDEAN, SinkhornConfig, ot_value_and_point_grads

METHODS = ("erm", "ot", "dann")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    alpha: float = 0.1
    epochs: int = 5
    batch_size: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # Strongly weighted alignment collapses feature batches into near-duplicate
    # rows whose transport plans converge very slowly at the bare solver
    # defaults; a run aborts on non-convergence, so the in-training solver
    # gets a blurrier epsilon and more iteration headroom.
    sinkhorn: SinkhornConfig = field(
        default_factory=lambda: SinkhornConfig(epsilon=0.1, max_iterations=20000)
    )
    seed: int = 0
    early_stopping: bool = True
    metric: str = EUCLIDEAN
    feature_widths: tuple = (64, 64, 32)
    classifier_widths: tuple = ()
    domain_head_widths: tuple = (16,)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.metric not in (EUCLIDEAN, SQUARED_EUCLIDEAN):
            raise ConfigurationError(f"unknown metric {self.metric!r}")

    def snapshot(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": {
                "learning_rate": self.optimizer.learning_rate,
                "momentum": self.optimizer.momentum,
                "weight_decay": self.optimizer.weight_decay,
            },
            "sinkhorn": {
                "epsilon": self.sinkhorn.epsilon,
                "max_iterations": self.sinkhorn.max_iterations,
                "marginal_tolerance": self.sinkhorn.marginal_tolerance,
                "log_domain": self.sinkhorn.log_domain,
                "relative_epsilon": self.sinkhorn.relative_epsilon,
            },
            "seed": self.seed,
            "early_stopping": self.early_stopping,
            "metric": self.metric,
            "feature_widths": list(self.feature_widths),
            "classifier_widths": list(self.classifier_widths),
            "domain_head_widths": list(self.domain_head_widths),
        }


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    aux_loss: float  # transport or adversary loss; 0 for erm
    val_accuracy: float
    test_accuracy: float
    wall_seconds: float

    def __post_init__(self):
        if not (np.isfinite(self.ce_loss) and np.isfinite(self.aux_loss)):
            raise ContractViolationError("epoch losses must be finite")
        for acc in (self.val_accuracy, self.test_accuracy):
            if not (0.0 <= acc <= 1.0):
                raise ContractViolationError("accuracies must lie in [0, 1]")


@dataclass
class RunReport:
    config: dict
    epochs: list
    selected_epoch: int
    final: dict  # split -> {"accuracy": ..., "auc": ...}
    seed: int

    def run_id(self) -> str:
        return f"{self.config['method']}_a{self.config['alpha']:g}_s{self.seed}"

    def to_json_dict(self, include_timing: bool = False) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "selected_epoch": self.selected_epoch,
            "final": self.final,
            "epochs": [
                {
                    "epoch": r.epoch,
                    "ce_loss": r.ce_loss,
                    "aux_loss": r.aux_loss,
                    "val_accuracy": r.val_accuracy,
                    "test_accuracy": r.test_accuracy,
                    # timing is machine noise; serialized reports stay reproducible
                    "wall_seconds": r.wall_seconds if include_timing else 0.0,
                }
                for r in self.epochs
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "RunReport":
        epochs = [
            EpochRecord(
                epoch=e["epoch"],
                ce_loss=e["ce_loss"],
                aux_loss=e["aux_loss"],
                val_accuracy=e["val_accuracy"],
                test_accuracy=e["test_accuracy"],
                wall_seconds=e.get("wall_seconds", 0.0),
            )
            for e in payload["epochs"]
        ]
        return cls(
            config=payload["config"],
            epochs=epochs,
            selected_epoch=payload["selected_epoch"],
            final=payload["final"],
            seed=payload["seed"],
        )


def _softmax_scores(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp[:, 1] / exp.sum(axis=1)


def evaluate_split(params: ModelParams, X: np.ndarray, y: np.ndarray) -> dict:
    features, _ = forward_features(params, X)
    logits = forward_classifier(params, features)
    acc = accuracy(logits, y)
    auc = None
    if logits.shape[1] == 2 and len(set(y.tolist())) == 2:
        auc = roc_auc(_softmax_scores(logits), y).auc
    return {"accuracy": acc, "auc": auc}


def binary_cross_entropy_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple:
    """Mean logistic loss over a single-logit column; returns (loss, dlogits)."""
    z = logits.reshape(-1)
    t = np.asarray(targets, dtype=float)
    if z.shape != t.shape:
        raise ContractViolationError("logits and targets must align")
    loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    sigma = 1.0 / (1.0 + np.exp(-z))
    grads = ((sigma - t) / z.size).reshape(logits.shape)
    return loss, grads


def composite_loss_and_grads(params: ModelParams, source_batch: tuple, target_batch, config: TrainConfig) -> tuple:
    """Losses and exact parameter gradients of CE + alpha * OT without taking
    a step. Returns (ce_loss, ot_loss, grads)."""
    xs, ys = source_batch
    if len(xs) == 0:
        raise ContractViolationError("empty source batch")
    use_ot = config.method == "ot" and config.alpha > 0
    if use_ot:
        if target_batch is None or len(target_batch) == 0:
            raise ContractViolationError("empty target batch")
        if len(target_batch) != len(xs):
            raise ContractViolationError(
                f"method 'ot' pairs equal-size batches; got {len(xs)} source and {len(target_batch)} target"
            )
    features_s, trace_s = forward_features(params, xs)
    logits = forward_classifier(params, features_s)
    ce_loss, dlogits = cross_entropy(logits, ys)
    if use_ot:
        features_t, trace_t = forward_features(params, target_batch)
        ot_loss, grad_s, grad_t = ot_value_and_point_grads(
            features_s, features_t, config.sinkhorn, config.metric
        )
        grads = backward(params, trace_s, config.alpha * grad_s, dlogits)
        grads = grads.add(backward(params, trace_t, config.alpha * grad_t, None))
    else:
        ot_loss = 0.0
        grads = backward(params, trace_s, None, dlogits)
    return ce_loss, ot_loss, grads


def composite_loss_step(params: ModelParams, source_batch: tuple, target_batch, config: TrainConfig) -> tuple:
    """One SGD step on CE + alpha * OT(features_s, features_t).

    For method "erm" (or alpha == 0) the transport term is skipped entirely,
    making the update identical to a plain erm step. Sinkhorn failure aborts
    the step by raising, so a sweep never silently drops its alignment term.
    """
    ce_loss, ot_loss, grads = composite_loss_and_grads(params, source_batch, target_batch, config)
    return sgd_step(params, grads, config.optimizer), ce_loss, ot_loss


def dann_step(params: ModelParams, source_batch: tuple, target_batch: np.ndarray, config: TrainConfig) -> tuple:
    """One SGD step of adversarial training: the domain head learns to tell
    source from target features while the featurizer receives that gradient
    reversed and scaled by alpha. Task and domain heads train normally."""
    xs, ys = source_batch
    if len(xs) == 0 or target_batch is None or len(target_batch) == 0:
        raise ContractViolationError("empty batch")
    if params.domain_head is None:
        raise ContractViolationError("dann_step needs a model with a domain head")
    features_s, trace_s = forward_features(params, xs)
    logits = forward_classifier(params, features_s)
    ce_loss, dlogits = cross_entropy(logits, ys)

    features_t, trace_t = forward_features(params, target_batch)
    stacked = np.vstack([features_s, features_t])
    domain_targets = np.concatenate([np.zeros(len(xs)), np.ones(len(target_batch))])
    head_out, head_inputs, head_preacts = _head_forward(params.domain_head, stacked)
    domain_loss, dhead = binary_cross_entropy_with_logits(head_out, domain_targets)
    head_grads, dstacked = _head_backward(params.domain_head, head_inputs, head_preacts, dhead)

    if config.alpha > 0:
        dfeat_s = -config.alpha * dstacked[: len(xs)]
        dfeat_t = -config.alpha * dstacked[len(xs):]
        grads = backward(params, trace_s, dfeat_s, dlogits)
        grads = grads.add(backward(params, trace_t, dfeat_t, None))
    else:
        grads = backward(params, trace_s, None, dlogits)
    grads.domain_head = head_grads
    return sgd_step(params, grads, config.optimizer), ce_loss, domain_loss


def train_with_model(dataset: DomainDataset, config: TrainConfig) -> tuple:
    """Run the configured method and return (report, params at the selected
    epoch). Epoch selection maximizes validation accuracy (first maximum)
    unless early stopping is disabled, in which case the last epoch is kept.
    """
    x_train, y_train = dataset.split_arrays("train")
    x_val, y_val = dataset.split_arrays("val")
    x_test, y_test = dataset.split_arrays("test")
    for name, x in (("train", x_train), ("val", x_val), ("test", x_test)):
        if len(x) == 0:
            raise ConfigurationError(f"{name} split is empty")

    params = init_model(
        input_dim=dataset.dim,
        feature_widths=config.feature_widths,
        num_classes=2,
        classifier_widths=config.classifier_widths,
        domain_head_widths=config.domain_head_widths if config.method == "dann" else None,
        seed=config.seed,
    )
    rng = np.random.default_rng([int(config.seed), 2])
    n_train, n_val = len(x_train), len(x_val)
    step = dann_step if config.method == "dann" else composite_loss_step

    records = []
    finals = []
    snapshots = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n_train)
        target_perm = rng.permutation(n_val)
        cursor = 0
        ce_sum = aux_sum = 0.0
        steps = 0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            take = (cursor + np.arange(len(idx))) % n_val
            cursor = int((cursor + len(idx)) % n_val)
            params, ce_loss, aux_loss = step(
                params, (x_train[idx], y_train[idx]), x_val[target_perm[take]], config
            )
            ce_sum += ce_loss
            aux_sum += aux_loss
            steps += 1
        val_metrics = evaluate_split(params, x_val, y_val)
        test_metrics = evaluate_split(params, x_test, y_test)
        records.append(
            EpochRecord(
                epoch=epoch,
                ce_loss=ce_sum / steps,
                aux_loss=aux_sum / steps,
                val_accuracy=val_metrics["accuracy"],
                test_accuracy=test_metrics["accuracy"],
                wall_seconds=time.perf_counter() - t0,
            )
        )
        finals.append({"val": val_metrics, "test": test_metrics})
        snapshots.append(params.copy())

    if config.early_stopping:
        selected = int(np.argmax([r.val_accuracy for r in records]))
    else:
        selected = len(records) - 1
    best_params = snapshots[selected]
    final = dict(finals[selected])
    final["train"] = evaluate_split(best_params, x_train, y_train)
    report = RunReport(
        config=config.snapshot(),
        epochs=records,
        selected_epoch=selected,
        final=final,
        seed=config.seed,
    )
    return report, best_params


def train(dataset: DomainDataset, config: TrainConfig) -> RunReport:
    return train_with_model(dataset, config)[0]


def _sweep_cell(args) -> tuple:
    dataset, config = args
    report = train(dataset, config)
    return report


def _worker_count(n_cells: int) -> int:
    raw = os.environ.get("OTDA_THREADS", "1")
    try:
        workers = max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"OTDA_THREADS must be an integer, got {raw!r}")
    return min(workers, n_cells)


@dataclass
class SweepResult:
    alphas: list
    seeds: list
    val_acc: np.ndarray  # (n_alphas, n_seeds)
    test_acc: np.ndarray
    selected_alpha: float
    reports: list  # list (per alpha) of lists (per seed) of RunReport

    @property
    def val_means(self):
        return self.val_acc.mean(axis=1)

    @property
    def val_stds(self):
        return self.val_acc.std(axis=1, ddof=1) if self.val_acc.shape[1] > 1 else np.zeros(len(self.alphas))

    @property
    def test_means(self):
        return self.test_acc.mean(axis=1)

    @property
    def test_stds(self):
        return self.test_acc.std(axis=1, ddof=1) if self.test_acc.shape[1] > 1 else np.zeros(len(self.alphas))

    def to_json_dict(self) -> dict:
        return {
            "alphas": [float(a) for a in self.alphas],
            "seeds": [int(s) for s in self.seeds],
            "val_accuracy": self.val_acc.tolist(),
            "test_accuracy": self.test_acc.tolist(),
            "val_mean": self.val_means.tolist(),
            "val_std": self.val_stds.tolist(),
            "test_mean": self.test_means.tolist(),
            "test_std": self.test_stds.tolist(),
            "selected_alpha": float(self.selected_alpha),
        }


def alpha_sweep(dataset: DomainDataset, base_config: TrainConfig, alphas, seeds=None) -> SweepResult:
    """Train per (alpha, seed) cell and aggregate mean/std accuracies.

    The selected alpha maximizes mean validation accuracy (first maximum in
    the given order). Cells run in parallel worker processes when the
    OTDA_THREADS environment variable is above 1.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigurationError("need at least one alpha value")
    if seeds is None:
        seeds = [base_config.seed + i for i in range(4)]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigurationError("need at least one seed")

    if base_config.method == "erm":
        raise ConfigurationError("alpha sweep needs a method with an alignment term (ot or dann)")
    cells = [
        (dataset, replace(base_config, alpha=alpha, seed=seed))
        for alpha in alphas
        for seed in seeds
    ]
    workers = _worker_count(len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(_sweep_cell, cells))
    else:
        flat = [_sweep_cell(cell) for cell in cells]

    reports = [flat[i * len(seeds):(i + 1) * len(seeds)] for i in range(len(alphas))]
    val_acc = np.array([[r.final["val"]["accuracy"] for r in row] for row in reports])
    test_acc = np.array([[r.final["test"]["accuracy"] for r in row] for row in reports])
    selected_alpha = alphas[int(np.argmax(val_acc.mean(axis=1)))]
    return SweepResult(alphas, seeds, val_acc, test_acc, selected_alpha, reports)


def run_seeds(dataset: DomainDataset, config: TrainConfig, seeds, keep_params: bool = False) -> list:
    """Train one configuration across several seeds; returns a list of
    RunReports, or (report, params) pairs when keep_params is set."""
    out = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        report, params = train_with_model(dataset, cfg)
        out.append((report, params) if keep_params else report)
    return out


def save_report(report: RunReport, path, include_timing: bool = False) -> None:
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_json_dict(include_timing), sort_keys=True, indent=2) + "\n")


def load_report(path) -> RunReport:
    from pathlib import Path

    return RunReport.from_json_dict(json.loads(Path(path).read_text()))


def write_epoch_csv(report: RunReport, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,ce_loss,aux_loss,val_accuracy,test_accuracy"]
    for r in report.epochs:
        lines.append(
            f"{r.epoch},{r.ce_loss:.9g},{r.aux_loss:.9g},{r.val_accuracy:.9g},{r.test_accuracy:.9g}"
        )
    path.write_text("\n".join(lines) + "\n")
