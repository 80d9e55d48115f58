"""Confusion-matrix metrics, rank-based ROC AUC, embedding export and a
deterministic 2-D projection for manifold inspection.

The ud class is the positive class throughout. Sensitivity is the ud
recall, specificity the normal recall; "precision", "recall" and "f1"
default to unweighted (macro) class means with an optional
support-weighted switch. Seed aggregation uses the population standard
deviation (ddof = 0).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .embedder import embed_batch

__all__ = [
    "ConfusionMatrix",
    "BasicMetrics",
    "MetricsReport",
    "UndefinedAUCError",
    "METRIC_ORDER",
    "confusion",
    "basic_metrics",
    "roc_auc",
    "evaluate_predictions",
    "aggregate_over_seeds",
    "export_embeddings",
    "pca_2d",
]

# Column order of the comparison table.
METRIC_ORDER = ("specificity", "sensitivity", "recall", "precision",
                "f1", "auc", "accuracy")


class UndefinedAUCError(ValueError):
    """AUC needs both classes present."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass(frozen=True)
class BasicMetrics:
    sensitivity: float
    specificity: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool


def confusion(predictions, labels) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    tp = fn = tn = fp = 0
    for pred, true in zip(predictions, labels):
        if true == "ud":
            if pred == "ud":
                tp += 1
            else:
                fn += 1
        else:
            if pred == "ud":
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, fn, tn, fp)


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def basic_metrics(cm: ConfusionMatrix, average: str = "macro") -> BasicMetrics:
    """Sensitivity, specificity, accuracy and averaged
    precision/recall/F1. Zero-denominator cases score 0 and raise the
    degenerate flag rather than silently inflating anything.

    average: "macro" (unweighted class mean, default) or "weighted"
    (class-support weighted).
    """
    if average not in ("macro", "weighted"):
        raise ValueError(f"unknown averaging mode {average!r}")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    degenerate = False

    sens, d1 = _safe_div(cm.tp, cm.tp + cm.fn)          # ud recall
    spec, d2 = _safe_div(cm.tn, cm.tn + cm.fp)          # normal recall
    prec_ud, d3 = _safe_div(cm.tp, cm.tp + cm.fp)
    prec_norm, d4 = _safe_div(cm.tn, cm.tn + cm.fn)
    degenerate = d1 or d2 or d3 or d4

    def f1_of(p, r):
        nonlocal degenerate
        val, deg = _safe_div(2.0 * p * r, p + r)
        degenerate = degenerate or deg
        return val

    f1_ud = f1_of(prec_ud, sens)
    f1_norm = f1_of(prec_norm, spec)

    if average == "macro":
        w_ud = w_norm = 0.5
    else:
        w_ud = (cm.tp + cm.fn) / cm.total
        w_norm = (cm.tn + cm.fp) / cm.total

    accuracy = (cm.tp + cm.tn) / cm.total
    return BasicMetrics(
        sensitivity=sens,
        specificity=spec,
        accuracy=accuracy,
        precision=w_ud * prec_ud + w_norm * prec_norm,
        recall=w_ud * sens + w_norm * spec,
        f1=w_ud * f1_ud + w_norm * f1_norm,
        degenerate=degenerate,
    )


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC of the ud class; ties count 1/2.

    Invariant under any strictly increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_ud = np.array([lab == "ud" for lab in labels])
    n_pos = int(is_ud.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("both classes required for AUC")
    ranks = _midranks(scores)
    rank_sum = float(ranks[is_ud].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_predictions(prob_ud, predicted, labels,
                         average: str = "macro") -> dict:
    """Full metric dict for one evaluated split."""
    cm = confusion(predicted, labels)
    bm = basic_metrics(cm, average=average)
    return {
        "specificity": bm.specificity,
        "sensitivity": bm.sensitivity,
        "recall": bm.recall,
        "precision": bm.precision,
        "f1": bm.f1,
        "auc": roc_auc(prob_ud, labels),
        "accuracy": bm.accuracy,
        "degenerate": bm.degenerate,
        "confusion": {"tp": cm.tp, "fn": cm.fn, "tn": cm.tn, "fp": cm.fp},
    }


@dataclass
class MetricsReport:
    mode: str
    seeds: list[int]
    metrics: dict[str, dict] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return self.metrics[name]["mean"]

    def std(self, name: str) -> float:
        return self.metrics[name]["std"]

    def as_dict(self) -> dict:
        return {"mode": self.mode, "seeds": list(self.seeds),
                "metrics": self.metrics}


def aggregate_over_seeds(mode: str, seeds, per_seed_metrics) -> MetricsReport:
    """mean +/- population std of every numeric metric across seeds."""
    report = MetricsReport(mode=mode, seeds=list(seeds))
    for name in METRIC_ORDER:
        values = [m[name] for m in per_seed_metrics]
        report.metrics[name] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
            "values": [float(v) for v in values],
        }
    return report


def export_embeddings(frozen_params, samples, path) -> None:
    """CSV of embeddings, one row per sample, sorted by
    (patient_id, lesion_id); decimal text round-trips exactly."""
    ordered = sorted(samples, key=lambda s: (s.patient_id, s.lesion_id, s.replica))
    if ordered:
        emb = embed_batch(frozen_params, [s.features for s in ordered])
        dim = emb.shape[1]
    else:
        emb = np.zeros((0, 0))
        dim = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "lesion_id", "label",
                         *(f"e_{i}" for i in range(dim))])
        for s, row in zip(ordered, emb):
            writer.writerow([s.patient_id, s.lesion_id, s.label,
                             *(repr(float(v)) for v in row)])


def _power_iteration(mat: np.ndarray, ortho_to=None,
                     tol: float = 1e-9, max_iter: int = 10000):
    """Dominant eigenpair by power iteration with a deterministic start;
    optionally kept orthogonal to an earlier direction."""
    dim = mat.shape[0]
    v = np.random.default_rng(0).normal(size=dim)
    if ortho_to is not None:
        v -= (v @ ortho_to) * ortho_to
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = mat @ v
        if ortho_to is not None:
            w -= (w @ ortho_to) * ortho_to
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return np.zeros(dim), 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    eigval = float(v @ (mat @ v))
    nz = np.nonzero(v)[0]
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v, eigval


def pca_2d(embeddings) -> np.ndarray:
    """Mean-centered projection onto the top-2 principal directions.

    Power iteration with deflation; sign fixed so the first nonzero
    loading of each direction is positive. Rank-deficient inputs yield a
    zero second (or first) component.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need >= 3 points for a 2-D projection")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / x.shape[0]
    scale = float(np.trace(cov))
    out = np.zeros((x.shape[0], 2))
    if scale == 0.0:
        return out
    v1, lam1 = _power_iteration(cov)
    out[:, 0] = xc @ v1
    deflated = cov - lam1 * np.outer(v1, v1)
    if np.trace(deflated) > 1e-12 * scale:
        v2, _ = _power_iteration(deflated, ortho_to=v1)
        out[:, 1] = xc @ v2
    return out
