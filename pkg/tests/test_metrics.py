import numpy as np
import pytest

from fedwrap.errors import EvaluationError, InputError
from fedwrap.metrics import (
    ConfusionMatrix,
    MetricsReport,
    aggregate_clients,
    confusion,
    metrics_from_confusion,
    report_csv,
)

from conftest import random_dataset


def brute_force_metrics(true, pred, n_classes, task):
    """Independent recount of every (true, pred) pair."""
    true, pred = list(true), list(pred)
    acc = sum(1 for t, p in zip(true, pred) if t == p) / len(true)

    def prf(cls):
        tp = sum(1 for t, p in zip(true, pred) if t == cls and p == cls)
        fp = sum(1 for t, p in zip(true, pred) if t != cls and p == cls)
        fn = sum(1 for t, p in zip(true, pred) if t == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return precision, recall, f1

    if task == "binary_positive":
        precision, recall, f1 = prf(1)
    else:
        vals = [prf(c) for c in range(n_classes)]
        precision = sum(v[0] for v in vals) / n_classes
        recall = sum(v[1] for v in vals) / n_classes
        f1 = sum(v[2] for v in vals) / n_classes
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1}


def cm_from_labels(true, pred, k):
    counts = np.zeros((k, k), dtype=int)
    for t, p in zip(true, pred):
        counts[t, p] += 1
    return ConfusionMatrix(counts=counts)


class TestConfusion:
    def test_perfect_predictor_diagonal(self, rng):
        ds = random_dataset(rng, 30, 2, 3)
        cm = confusion(lambda x: ds.labels, ds)
        assert np.all(cm.counts == np.diag(np.diag(cm.counts)))
        assert cm.total == 30

    def test_constant_zero_predictor(self, rng):
        ds = random_dataset(rng, 10, 2, 2)
        ds.labels[:] = np.repeat([0, 1], 5)
        cm = confusion(lambda x: np.zeros(len(x), dtype=int), ds)
        np.testing.assert_array_equal(cm.counts, [[5, 0], [5, 0]])

    def test_hand_case(self, rng):
        ds = random_dataset(rng, 6, 2, 2)
        ds.labels[:] = [0, 0, 1, 1, 1, 0]
        pred = np.array([0, 1, 1, 1, 0, 0])
        cm = confusion(lambda x: pred, ds)
        np.testing.assert_array_equal(cm.counts, [[2, 1], [1, 2]])

    def test_out_of_range_prediction(self, rng):
        ds = random_dataset(rng, 5, 2, 2)
        with pytest.raises(EvaluationError):
            confusion(lambda x: np.full(len(x), 7), ds)


class TestMetricsFromConfusion:
    def test_hand_binary(self):
        cm = ConfusionMatrix(counts=np.array([[2, 1], [1, 2]]))
        m = metrics_from_confusion(cm, "binary_positive")
        assert m["accuracy"] == pytest.approx(4 / 6)
        assert m["precision"] == pytest.approx(2 / 3)
        assert m["recall"] == pytest.approx(2 / 3)
        assert m["f1"] == pytest.approx(2 / 3)

    def test_diagonal_all_ones(self):
        cm = ConfusionMatrix(counts=np.diag([3, 4, 5]))
        m = metrics_from_confusion(cm, "macro")
        assert all(v == 1.0 for v in m.values())

    def test_never_positive_conventions(self):
        cm = ConfusionMatrix(counts=np.array([[5, 0], [5, 0]]))
        m = metrics_from_confusion(cm, "binary_positive")
        assert m["precision"] == 0.0
        assert m["recall"] == 0.0
        assert m["f1"] == 0.0

    def test_binary_task_needs_two_classes(self):
        cm = ConfusionMatrix(counts=np.eye(3, dtype=int))
        with pytest.raises(InputError):
            metrics_from_confusion(cm, "binary_positive")

    def test_accuracy_is_trace_over_total(self, rng):
        for _ in range(20):
            k = int(rng.integers(2, 5))
            counts = rng.integers(0, 9, size=(k, k))
            if counts.sum() == 0:
                counts[0, 0] = 1
            cm = ConfusionMatrix(counts=counts)
            m = metrics_from_confusion(cm, "macro")
            assert m["accuracy"] == pytest.approx(np.trace(counts) / counts.sum())

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(1, 40))
            true = rng.integers(0, k, size=n)
            pred = rng.integers(0, k, size=n)
            task = "binary_positive" if k == 2 else "macro"
            got = metrics_from_confusion(cm_from_labels(true, pred, k), task)
            want = brute_force_metrics(true, pred, k, task)
            assert got == want  # exact, including zero-denominator conventions

    def test_macro_invariant_under_label_permutation(self, rng):
        k = 4
        true = rng.integers(0, k, size=60)
        pred = rng.integers(0, k, size=60)
        perm = rng.permutation(k)
        base = metrics_from_confusion(cm_from_labels(true, pred, k), "macro")
        permuted = metrics_from_confusion(cm_from_labels(perm[true], perm[pred], k), "macro")
        for key in base:
            assert base[key] == pytest.approx(permuted[key])


class TestAggregate:
    def test_hand_pair(self):
        reports = [
            {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 0.2},
            {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 0.4},
        ]
        agg = aggregate_clients(reports)
        assert agg["f1"] == (pytest.approx(0.3), pytest.approx(0.1))  # population std

    def test_single_client(self):
        agg = aggregate_clients([{"accuracy": 0.7, "precision": 0.1, "recall": 0.2, "f1": 0.15}])
        assert agg["accuracy"] == (0.7, 0.0)

    def test_identical_reports_zero_std(self):
        r = {"accuracy": 0.6, "precision": 0.5, "recall": 0.4, "f1": 0.44}
        agg = aggregate_clients([r, r, r])
        for mean, std in agg.values():
            assert std == 0.0

    def test_report_csv_layout(self):
        report = MetricsReport.from_per_client(
            {
                "0": {
                    "local": {"accuracy": 0.5, "precision": 0.1, "recall": 0.2, "f1": 0.13},
                    "wrapper": {"accuracy": 0.8, "precision": 0.7, "recall": 0.6, "f1": 0.65},
                }
            }
        )
        text = report_csv(report, n_clients=1, setting="toy")
        lines = text.strip().splitlines()
        assert lines[0] == "n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std"
        assert len(lines) == 5
        assert lines[1].startswith("1,toy,accuracy,0.500000,0.000000,0.800000")
