"""Classification evaluation on the shared balanced test set.

Binary tasks report positive-class (class 1) precision/recall/F1; multi-class
tasks report unweighted macro averages. Cross-client aggregation uses the
arithmetic mean and the population standard deviation, so a single client is
well-defined (std 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, InputError

TASK_BINARY_POSITIVE = "binary_positive"
TASK_MACRO = "macro"

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass
class ConfusionMatrix:
    """counts[i, j] = samples with true class i predicted as class j."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise InputError("confusion matrix counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predict, test_set) -> ConfusionMatrix:
    """Count (true, predicted) pairs; `predict` maps a feature matrix to labels."""
    if test_set.n_rows == 0:
        raise EvaluationError("empty test set")
    pred = np.asarray(predict(test_set.features), dtype=np.int64)
    if pred.shape != (test_set.n_rows,):
        raise EvaluationError(
            f"predict returned shape {pred.shape}, expected ({test_set.n_rows},)"
        )
    k = test_set.n_classes
    if np.any(pred < 0) or np.any(pred >= k):
        raise EvaluationError("predict produced labels outside [0, n_classes)")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (test_set.labels, pred), 1)
    return ConfusionMatrix(counts=counts)


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def metrics_from_confusion(cm: ConfusionMatrix, task: str = TASK_BINARY_POSITIVE) -> dict[str, float]:
    """Accuracy plus precision/recall/F1 under the named task convention.

    Zero denominators yield 0, and F1 is 0 when precision + recall is 0.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise EvaluationError("confusion matrix is empty")
    accuracy = float(np.trace(counts)) / total
    if task == TASK_BINARY_POSITIVE:
        if cm.n_classes != 2:
            raise InputError(
                f"binary_positive requires 2 classes, matrix has {cm.n_classes}"
            )
        tp = float(counts[1, 1])
        fp = float(counts[0, 1])
        fn = float(counts[1, 0])
        precision, recall, f1 = _prf(tp, fp, fn)
    elif task == TASK_MACRO:
        ps, rs, fs = [], [], []
        for c in range(cm.n_classes):
            tp = float(counts[c, c])
            fp = float(counts[:, c].sum() - tp)
            fn = float(counts[c, :].sum() - tp)
            p, r, f = _prf(tp, fp, fn)
            ps.append(p)
            rs.append(r)
            fs.append(f)
        precision = float(np.mean(ps))
        recall = float(np.mean(rs))
        f1 = float(np.mean(fs))
    else:
        raise InputError(f"unknown task {task!r}")
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def default_task(n_classes: int) -> str:
    return TASK_BINARY_POSITIVE if n_classes == 2 else TASK_MACRO


def aggregate_clients(reports: list[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, population std) over client reports."""
    if not reports:
        raise InputError("need at least one client report")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([r[name] for r in reports])
        # identical values have std exactly 0; np.std would leave rounding dust
        std = 0.0 if np.ptp(vals) == 0 else float(vals.std())
        out[name] = (float(vals.mean()), std)
    return out


@dataclass
class MetricsReport:
    """Per-client metrics for each evaluated model kind plus aggregates.

    per_client: client_id -> model_kind -> metric -> value
    aggregate:  model_kind -> metric -> (mean, population std)
    """

    per_client: dict[str, dict[str, dict[str, float]]]
    aggregate: dict[str, dict[str, tuple[float, float]]]

    @classmethod
    def from_per_client(cls, per_client: dict[str, dict[str, dict[str, float]]]) -> "MetricsReport":
        kinds: list[str] = []
        for models in per_client.values():
            for kind in models:
                if kind not in kinds:
                    kinds.append(kind)
        aggregate = {
            kind: aggregate_clients(
                [models[kind] for models in per_client.values() if kind in models]
            )
            for kind in kinds
        }
        return cls(per_client=per_client, aggregate=aggregate)


def report_csv(report: MetricsReport, n_clients: int, setting: str) -> str:
    """Comparison table: one row per metric, local vs wrapper mean and std."""
    lines = ["n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std"]
    local = report.aggregate.get("local", {})
    wrapper = report.aggregate.get("wrapper", {})
    for metric in METRIC_NAMES:
        lm, ls = local.get(metric, (float("nan"),) * 2)
        wm, ws = wrapper.get(metric, (float("nan"),) * 2)
        lines.append(
            f"{n_clients},{setting},{metric},{lm:.6f},{ls:.6f},{wm:.6f},{ws:.6f}"
        )
    return "\n".join(lines) + "\n"
