"""Metrics (accuracy, ROC/AUC), per-subcluster breakdowns, deterministic 2-D
PCA export, and table/plot emission. All file output is byte-stable: fixed
float formatting, sorted keys, hand-written SVG with no timestamps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateProjectionError,
    FeatureUnavailableError,
    UndefinedMetricError,
)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Argmax-match rate; ties break toward the lower class index."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ContractViolationError(f"logits must be a non-empty 2-D array, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ContractViolationError("labels length does not match logits")
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; starts at +inf
    fpr: np.ndarray  # nondecreasing from 0 to 1
    tpr: np.ndarray  # nondecreasing from 0 to 1
    auc: float


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """ROC curve from class-1 scores via a sweep over distinct thresholds;
    the AUC trapezoid equals the normalized Mann-Whitney U statistic."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractViolationError("scores and labels must be matching 1-D arrays")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(float)
    # indices closing each group of tied scores
    distinct = np.flatnonzero(np.diff(sorted_scores) != 0)
    boundary = np.concatenate([distinct, [scores.size - 1]])
    tps = np.cumsum(sorted_pos)[boundary]
    fps = (boundary + 1) - tps
    thresholds = np.concatenate([[np.inf], sorted_scores[boundary]])
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


@dataclass(frozen=True)
class BreakdownCell:
    domain_id: int | None
    tag: str
    count: int
    accuracy: float
    masked: bool


def subcluster_breakdown(
    predictions: np.ndarray,
    labels: np.ndarray,
    subcluster_tags,
    domain_ids=None,
    masked_tag: str | None = None,
) -> list:
    """Accuracy per (domain, subcluster) cell; cells partition the inputs.

    domain_ids may be omitted, in which case cells are per tag only. The cell
    matching masked_tag is flagged so reports can highlight the phenotype the
    training split never saw.
    """
    if subcluster_tags is None:
        raise FeatureUnavailableError("subcluster tags are not available for this dataset")
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tags = np.asarray(subcluster_tags)
    if predictions.shape != labels.shape or tags.shape != labels.shape:
        raise ContractViolationError("predictions, labels and tags must share one length")
    if domain_ids is None:
        domains = np.zeros(labels.shape, dtype=int)
        keyed = False
    else:
        domains = np.asarray(domain_ids)
        keyed = True
    correct = predictions == labels
    cells = []
    for dom in sorted(set(domains.tolist())):
        dom_mask = domains == dom
        for tag in sorted(set(tags[dom_mask].tolist())):
            mask = dom_mask & (tags == tag)
            cells.append(
                BreakdownCell(
                    domain_id=int(dom) if keyed else None,
                    tag=str(tag),
                    count=int(mask.sum()),
                    accuracy=float(correct[mask].mean()),
                    masked=(tag == masked_tag),
                )
            )
    return cells


def pca_project(features: np.ndarray) -> np.ndarray:
    """Deterministic projection onto the top-2 principal directions.

    Signs are fixed by making each component's largest-magnitude loading
    positive. Raises on fewer than 2 rows or zero total variance.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractViolationError(f"need at least 2 rows to project, got shape {X.shape}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if float(eigvals[-1]) <= 0.0:
        raise DegenerateProjectionError("input has zero variance; nothing to project")
    components = eigvecs[:, ::-1][:, :2]
    for j in range(components.shape[1]):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ({std:.3f})"


def _write_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="\n") as fh:
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def write_alpha_table(alphas, val_stats, test_stats, path) -> Path:
    """Grid with one column per alpha and mean (std) accuracy entries."""
    path = Path(path)
    header = ["metric"] + [f"{a:g}" for a in alphas]
    rows = [
        header,
        ["validation_accuracy"] + [format_mean_std(m, s) for m, s in val_stats],
        ["test_accuracy"] + [format_mean_std(m, s) for m, s in test_stats],
    ]
    _write_csv(path, rows)
    return path


def write_method_table(stats: dict, path) -> Path:
    """stats: method name -> dict with val_mean/val_std/test_mean/test_std."""
    path = Path(path)
    methods = list(stats)
    rows = [
        ["metric"] + methods,
        ["validation_accuracy"]
        + [format_mean_std(stats[m]["val_mean"], stats[m]["val_std"]) for m in methods],
        ["test_accuracy"]
        + [format_mean_std(stats[m]["test_mean"], stats[m]["test_std"]) for m in methods],
    ]
    _write_csv(path, rows)
    return path


def write_breakdown_table(cells, path) -> Path:
    path = Path(path)
    rows = [["domain_id", "subcluster", "count", "accuracy", "masked"]]
    for c in cells:
        rows.append(
            ["" if c.domain_id is None else c.domain_id, c.tag, c.count, f"{c.accuracy:.6f}", int(c.masked)]
        )
    _write_csv(path, rows)
    return path


def write_embedding_csv(projection, labels, domain_ids, path) -> Path:
    path = Path(path)
    rows = [["pc1", "pc2", "label", "domain_id"]]
    for i in range(projection.shape[0]):
        rows.append(
            [f"{projection[i, 0]:.9g}", f"{projection[i, 1]:.9g}", int(labels[i]), int(domain_ids[i])]
        )
    _write_csv(path, rows)
    return path


# ---------------------------------------------------------------------------
# Minimal SVG line plots (hand-written so repeated emission is byte-identical)
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 400
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return [float(v) for v in raw]


def line_plot_svg(series, title: str, xlabel: str, ylabel: str, path) -> Path:
    """series: list of (name, xs, ys). Writes a fixed-size SVG line chart."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ContractViolationError("nothing to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return _MT + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{plot_w}" height="{plot_h}" fill="none" '
        f'stroke="#333" stroke-width="1"/>',
    ]
    for tx in _ticks(x_lo, x_hi):
        px = sx(tx)
        parts.append(f'<line x1="{px:.2f}" y1="{_MT + plot_h}" x2="{px:.2f}" y2="{_MT + plot_h + 5}" stroke="#333"/>')
        parts.append(
            f'<text x="{px:.2f}" y="{_MT + plot_h + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{tx:.3g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        py = sy(ty)
        parts.append(f'<line x1="{_ML - 5}" y1="{py:.2f}" x2="{_ML}" y2="{py:.2f}" stroke="#333"/>')
        parts.append(
            f'<text x="{_ML - 8}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{ty:.3g}</text>'
        )
    parts.append(
        f'<text x="{_ML + plot_w / 2:.1f}" y="{_H - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>'
    )
    parts.append(
        f'<text x="18" y="{_MT + plot_h / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 18 {_MT + plot_h / 2:.1f})">{ylabel}</text>'
    )
    for i, (name, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _MT + 16 + 16 * i
        parts.append(f'<line x1="{_ML + 10}" y1="{ly - 4}" x2="{_ML + 34}" y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_ML + 40}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def write_roc_plot(curves: dict, path) -> Path:
    """curves: name -> RocCurve."""
    series = [
        (f"{name} (AUC {curve.auc:.3f})", curve.fpr.tolist(), curve.tpr.tolist())
        for name, curve in curves.items()
    ]
    series.append(("chance", [0.0, 1.0], [0.0, 1.0]))
    return line_plot_svg(series, "ROC", "false positive rate", "true positive rate", path)


def emit_tables(reports: list, out_dir, sweep=None, breakdown_cells=None, roc_curves=None) -> list:
    """Emit the standard report bundle for a list of RunReports: per-method
    comparison table, per-run epoch curves, and any optional extras supplied.
    Returns the written paths."""
    if not reports:
        raise ContractViolationError("need at least one report to emit")
    out = Path(out_dir)
    written = []

    by_method = {}
    for rep in reports:
        by_method.setdefault(rep.config["method"], []).append(rep)
    stats = {}
    for method in sorted(by_method):
        group = by_method[method]
        vals = np.array([r.final["val"]["accuracy"] for r in group])
        tests = np.array([r.final["test"]["accuracy"] for r in group])
        stats[method] = {
            "val_mean": float(vals.mean()),
            "val_std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "test_mean": float(tests.mean()),
            "test_std": float(tests.std(ddof=1)) if tests.size > 1 else 0.0,
        }
    written.append(write_method_table(stats, out / "tables" / "method_comparison.csv"))

    for rep in reports:
        run_id = rep.run_id()
        epochs = [r.epoch for r in rep.epochs]
        series = [
            ("CE loss", epochs, [r.ce_loss for r in rep.epochs]),
            ("alignment loss", epochs, [r.aux_loss for r in rep.epochs]),
            ("validation accuracy", epochs, [r.val_accuracy for r in rep.epochs]),
        ]
        written.append(
            line_plot_svg(
                series,
                f"training curves ({run_id})",
                "epoch",
                "value",
                out / "plots" / f"curves_{run_id}.svg",
            )
        )

    if sweep is not None:
        written.append(
            write_alpha_table(
                sweep.alphas,
                list(zip(sweep.val_means, sweep.val_stds)),
                list(zip(sweep.test_means, sweep.test_stds)),
                out / "tables" / "alpha_sweep.csv",
            )
        )
    if breakdown_cells is not None:
        written.append(write_breakdown_table(breakdown_cells, out / "tables" / "subcluster_breakdown.csv"))
    if roc_curves:
        written.append(write_roc_plot(roc_curves, out / "plots" / "roc.svg"))
    return written
