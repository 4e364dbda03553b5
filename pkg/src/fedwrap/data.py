"""Tabular ingestion, preprocessing, and heterogeneous client partitioning.

Three partition schemes produce per-client training sets from one pool:

* imbalanced  -- client sizes follow one Dirichlet draw, rows sampled
  uniformly, so class proportions stay roughly equal across clients.
* noniid      -- per-class Dirichlet draws, so class distributions differ
  across clients while per-class totals are conserved exactly.
* bank        -- binary minority-positive special case: positives are
  spread by a Dirichlet draw, then every client is padded with negatives
  to one common size.

A class-balanced global test set is carved out before any client split.
All randomness flows from explicit seeds; identical inputs give identical
partitions byte-for-byte in exported form.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, InputError, PartitionError
from .models import derive_seed

MODE_IMBALANCED = "imbalanced"
MODE_NONIID = "noniid"
MODE_BANK = "bank"
PARTITION_MODES = (MODE_IMBALANCED, MODE_NONIID, MODE_BANK)

# at alpha ~0.1 with ten clients a draw leaves some client empty roughly
# 19 times out of 20, so the retry budget must be generous
_MAX_DRAW_RETRIES = 1000


@dataclass
class Dataset:
    """Encoded classification table: float features, dense integer labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InputError(f"features must be 2-d, got shape {self.features.shape}")
        if self.features.shape[0] < 1:
            raise InputError("dataset must contain at least one row")
        if self.labels.shape != (self.features.shape[0],):
            raise InputError("labels length does not match feature rows")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain NaN or infinite values")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise InputError("labels outside [0, n_classes)")
        if len(self.feature_names) != self.features.shape[1]:
            raise InputError("feature_names length does not match feature columns")

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            n_classes=self.n_classes,
            feature_names=self.feature_names,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha: float
    mode: str
    seed: int
    test_fraction: float

    def __post_init__(self):
        if self.n_clients < 2:
            raise InputError(f"n_clients must be >= 2, got {self.n_clients}")
        if not self.alpha > 0:
            raise InputError(f"alpha must be > 0, got {self.alpha}")
        if self.mode not in PARTITION_MODES:
            raise InputError(f"mode must be one of {PARTITION_MODES}, got {self.mode!r}")
        if not (0.0 < self.test_fraction < 1.0):
            raise InputError(f"test_fraction must be in (0,1), got {self.test_fraction}")


@dataclass
class Partition:
    """Per-client training sets plus the shared balanced test set.

    Row indices refer to the dataset the partitioner was given, so the
    split can be audited and replayed from the manifest alone.
    """

    client_datasets: list[Dataset]
    test_set: Dataset
    spec: PartitionSpec
    client_row_indices: list[np.ndarray]
    test_row_indices: np.ndarray


# ---------------------------------------------------------------------------
# CSV ingestion


def read_schema(path: str | Path) -> dict[str, str]:
    """Schema file: JSON object mapping column name -> numeric|categorical|label."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read schema file {path}: {exc}") from exc
    try:
        schema = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"schema file {path} is not valid JSON: {exc}") from exc
    if not isinstance(schema, dict) or not schema:
        raise IngestionError(f"schema file {path} must be a non-empty JSON object")
    for col, role in schema.items():
        if role not in ("numeric", "categorical", "label"):
            raise IngestionError(f"schema column {col!r} has unknown role {role!r}")
    return schema


def encode_table(header: list[str], rows: list[list[str]], schema: dict[str, str]) -> Dataset:
    """Encode raw string cells into a Dataset.

    Numeric columns are standardized to zero mean / unit variance with
    statistics over all rows (population variance). Categorical columns are
    one-hot encoded in first-appearance order; the label column is mapped to
    dense integer ids in first-appearance order.
    """
    if not rows:
        raise IngestionError("no data rows")
    label_cols = [c for c, role in schema.items() if role == "label"]
    if len(label_cols) != 1:
        raise IngestionError(f"schema must name exactly one label column, got {label_cols}")
    missing = [c for c in schema if c not in header]
    if missing:
        raise IngestionError(f"schema columns not present in file header: {missing}")
    extra = [c for c in header if c not in schema]
    if extra:
        raise IngestionError(f"file columns not covered by the schema: {extra}")
    col_pos = {c: header.index(c) for c in header}
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise IngestionError(f"row {r + 2}: has {len(row)} cells, header has {len(header)}")

    feature_cols: list[np.ndarray] = []
    feature_names: list[str] = []
    for col in header:
        role = schema[col]
        pos = col_pos[col]
        if role == "numeric":
            vals = np.empty(len(rows))
            for r, row in enumerate(rows):
                try:
                    vals[r] = float(row[pos])
                except ValueError as exc:
                    raise IngestionError(
                        f"row {r + 2}, column {col!r}: cannot parse {row[pos]!r} as numeric"
                    ) from exc
            if not np.all(np.isfinite(vals)):
                bad = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise IngestionError(f"row {bad + 2}, column {col!r}: non-finite value")
            mean = float(vals.mean())
            std = float(vals.std())  # population variance
            feature_cols.append((vals - mean) / (std if std > 0 else 1.0))
            feature_names.append(col)
        elif role == "categorical":
            categories: list[str] = []
            seen: dict[str, int] = {}
            ids = np.empty(len(rows), dtype=np.int64)
            for r, row in enumerate(rows):
                cell = row[pos]
                if cell not in seen:
                    seen[cell] = len(categories)
                    categories.append(cell)
                ids[r] = seen[cell]
            onehot = np.zeros((len(rows), len(categories)))
            onehot[np.arange(len(rows)), ids] = 1.0
            for k, cat in enumerate(categories):
                feature_cols.append(onehot[:, k])
                feature_names.append(f"{col}={cat}")

    label_col = label_cols[0]
    pos = col_pos[label_col]
    label_ids: dict[str, int] = {}
    labels = np.empty(len(rows), dtype=np.int64)
    for r, row in enumerate(rows):
        cell = row[pos]
        if cell not in label_ids:
            label_ids[cell] = len(label_ids)
        labels[r] = label_ids[cell]

    return Dataset(
        features=np.column_stack(feature_cols),
        labels=labels,
        n_classes=len(label_ids),
        feature_names=feature_names,
    )


def load_csv(path: str | Path, schema: dict[str, str]) -> Dataset:
    """Read a headered CSV and encode it per `schema`."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            table = list(reader)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not table:
        raise IngestionError(f"{path} is empty")
    return encode_table(table[0], table[1:], schema)


def write_matrix_csv(data: Dataset, path: str | Path) -> None:
    """Write an already-encoded dataset: feature columns plus a final integer
    `label` column. Floats use shortest round-trip formatting, so rewriting
    an identical dataset produces identical bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(data.feature_names) + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def read_matrix_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read a file produced by write_matrix_csv. No re-preprocessing happens.

    Pass n_classes explicitly for client shards that may lack some class.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            table = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(table) < 2:
        raise IngestionError(f"{path} has no data rows")
    header = table[0]
    if not header or header[-1] != "label":
        raise IngestionError(f"{path}: expected final column 'label'")
    try:
        features = np.array([[float(v) for v in row[:-1]] for row in table[1:]])
        labels = np.array([int(row[-1]) for row in table[1:]], dtype=np.int64)
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(features=features, labels=labels, n_classes=k, feature_names=header[:-1])


# ---------------------------------------------------------------------------
# Splitting and partitioning


def split_test(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a class-balanced test set: floor(test_fraction * n / n_classes)
    rows of every class, drawn uniformly; the remainder is the train pool."""
    pool_idx, test_idx = split_test_indices(data, test_fraction, seed)
    return data.subset(pool_idx), data.subset(test_idx)


def split_test_indices(
    data: Dataset, test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    if not (0.0 < test_fraction < 1.0):
        raise PartitionError(f"test_fraction must be in (0,1), got {test_fraction}")
    m = math.floor(test_fraction * data.n_rows / data.n_classes)
    if m < 1:
        raise PartitionError(
            f"test_fraction {test_fraction} yields zero test rows per class"
        )
    rng = np.random.default_rng(seed)
    test_parts = []
    for c in range(data.n_classes):
        class_idx = np.flatnonzero(data.labels == c)
        if len(class_idx) < max(m, 2):
            raise PartitionError(
                f"class {c} has {len(class_idx)} rows, cannot supply {m} test samples"
            )
        chosen = rng.choice(class_idx, size=m, replace=False)
        test_parts.append(np.sort(chosen))
    test_idx = np.concatenate(test_parts)
    mask = np.ones(data.n_rows, dtype=bool)
    mask[test_idx] = False
    return np.flatnonzero(mask), test_idx


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`, exact sum.

    Floor each share, then hand the leftover units to the largest fractional
    remainders (ties broken by lower index) so the result is deterministic.
    """
    weights = np.asarray(weights, dtype=np.float64)
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        remainders = shares - counts
        order = np.argsort(-remainders, kind="stable")
        counts[order[:leftover]] += 1
    return counts


def _chunk_by_counts(indices: np.ndarray, counts: np.ndarray) -> list[np.ndarray]:
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [indices[bounds[i] : bounds[i + 1]] for i in range(len(counts))]


def partition_imbalanced(data: Dataset, spec: PartitionSpec) -> Partition:
    """Dirichlet draw over client sizes; rows sampled uniformly, so each
    client's class mix approximates the pool's."""
    if spec.mode != MODE_IMBALANCED:
        raise InputError(f"spec.mode is {spec.mode!r}, expected {MODE_IMBALANCED!r}")
    pool_idx, test_idx = split_test_indices(data, spec.test_fraction, spec.seed)
    rng = np.random.default_rng(derive_seed(spec.seed, "assign"))
    n = len(pool_idx)
    for _ in range(_MAX_DRAW_RETRIES):
        p = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
        counts = largest_remainder(p, n)
        if np.all(counts >= 1):
            perm = rng.permutation(pool_idx)
            client_rows = _chunk_by_counts(perm, counts)
            return _assemble(data, spec, client_rows, test_idx)
    raise PartitionError(
        f"could not give every one of {spec.n_clients} clients a sample "
        f"after {_MAX_DRAW_RETRIES} draws"
    )


def partition_noniid(data: Dataset, spec: PartitionSpec) -> Partition:
    """Independent per-class Dirichlet draws: client class distributions
    diverge while each class's total is conserved exactly."""
    if spec.mode != MODE_NONIID:
        raise InputError(f"spec.mode is {spec.mode!r}, expected {MODE_NONIID!r}")
    pool_idx, test_idx = split_test_indices(data, spec.test_fraction, spec.seed)
    rng = np.random.default_rng(derive_seed(spec.seed, "assign"))
    pool_labels = data.labels[pool_idx]
    for _ in range(_MAX_DRAW_RETRIES):
        per_client: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
        for c in range(data.n_classes):
            class_idx = pool_idx[pool_labels == c]
            q = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            counts = largest_remainder(q, len(class_idx))
            for i, rows in enumerate(_chunk_by_counts(rng.permutation(class_idx), counts)):
                per_client[i].append(rows)
        client_rows = [np.concatenate(parts) for parts in per_client]
        if all(len(rows) >= 1 for rows in client_rows):
            return _assemble(data, spec, client_rows, test_idx)
    raise PartitionError(
        f"could not give every one of {spec.n_clients} clients a sample "
        f"after {_MAX_DRAW_RETRIES} draws"
    )


def partition_bank(data: Dataset, spec: PartitionSpec) -> Partition:
    """Minority-positive special case: Dirichlet over the positive pool only,
    then pad every client with uniformly sampled negatives to the common size
    floor(pool / n_clients)."""
    if spec.mode != MODE_BANK:
        raise InputError(f"spec.mode is {spec.mode!r}, expected {MODE_BANK!r}")
    if data.n_classes != 2:
        raise PartitionError("bank mode requires binary labels")
    pool_idx, test_idx = split_test_indices(data, spec.test_fraction, spec.seed)
    pool_labels = data.labels[pool_idx]
    pos_idx = pool_idx[pool_labels == 1]
    neg_idx = pool_idx[pool_labels == 0]
    if len(pos_idx) >= len(neg_idx):
        raise PartitionError(
            f"bank mode expects class 1 to be the minority "
            f"({len(pos_idx)} positives vs {len(neg_idx)} negatives)"
        )
    size = len(pool_idx) // spec.n_clients
    if size < 1:
        raise PartitionError("fewer pool rows than clients")
    rng = np.random.default_rng(derive_seed(spec.seed, "assign"))
    for _ in range(_MAX_DRAW_RETRIES):
        q = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
        pos_counts = largest_remainder(q, len(pos_idx))
        if np.any(pos_counts > size):
            continue
        neg_counts = size - pos_counts
        if int(neg_counts.sum()) > len(neg_idx):
            raise PartitionError(
                f"insufficient negatives to pad: need {int(neg_counts.sum())}, "
                f"have {len(neg_idx)}"
            )
        pos_chunks = _chunk_by_counts(rng.permutation(pos_idx), pos_counts)
        neg_chunks = _chunk_by_counts(rng.permutation(neg_idx), neg_counts)
        client_rows = [np.concatenate([p, n]) for p, n in zip(pos_chunks, neg_chunks)]
        return _assemble(data, spec, client_rows, test_idx)
    raise PartitionError(
        f"positive allocation exceeded the common client size {size} "
        f"after {_MAX_DRAW_RETRIES} draws"
    )


_PARTITIONERS = {
    MODE_IMBALANCED: partition_imbalanced,
    MODE_NONIID: partition_noniid,
    MODE_BANK: partition_bank,
}


def partition_dataset(data: Dataset, spec: PartitionSpec) -> Partition:
    """Dispatch to the partitioner named by spec.mode."""
    return _PARTITIONERS[spec.mode](data, spec)


def _assemble(
    data: Dataset,
    spec: PartitionSpec,
    client_rows: list[np.ndarray],
    test_idx: np.ndarray,
) -> Partition:
    client_rows = [np.asarray(rows, dtype=np.int64) for rows in client_rows]
    return Partition(
        client_datasets=[data.subset(rows) for rows in client_rows],
        test_set=data.subset(test_idx),
        spec=spec,
        client_row_indices=client_rows,
        test_row_indices=np.asarray(test_idx, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Partition inspection and export


def class_histogram(partition: Partition) -> list[tuple[int, int, int]]:
    """Exact per-client per-class counts as (client_id, class_id, count) rows."""
    rows = []
    for i, ds in enumerate(partition.client_datasets):
        counts = ds.class_counts()
        for c in range(ds.n_classes):
            rows.append((i, c, int(counts[c])))
    return rows


def histogram_csv(partition: Partition) -> str:
    lines = ["client_id,class_id,count"]
    for client, cls, count in class_histogram(partition):
        lines.append(f"{client},{cls},{count}")
    return "\n".join(lines) + "\n"


def partition_manifest(partition: Partition) -> dict:
    """Replayable record of the split: spec fields plus explicit row indices."""
    spec = partition.spec
    return {
        "mode": spec.mode,
        "alpha": spec.alpha,
        "seed": spec.seed,
        "n_clients": spec.n_clients,
        "test_fraction": spec.test_fraction,
        "n_classes": partition.test_set.n_classes,
        "feature_names": list(partition.test_set.feature_names),
        "client_sizes": [ds.n_rows for ds in partition.client_datasets],
        "client_row_indices": [rows.tolist() for rows in partition.client_row_indices],
        "test_row_indices": partition.test_row_indices.tolist(),
    }


def mean_pairwise_tv(partition: Partition) -> float:
    """Mean total-variation distance between client class distributions."""
    dists = [
        ds.class_counts() / ds.n_rows for ds in partition.client_datasets
    ]
    total, pairs = 0.0, 0
    for i in range(len(dists)):
        for j in range(i + 1, len(dists)):
            total += 0.5 * float(np.abs(dists[i] - dists[j]).sum())
            pairs += 1
    return total / pairs if pairs else 0.0


# ---------------------------------------------------------------------------
# Synthetic minority-positive surrogate (offline stand-in for a real
# marketing-calls table: ~11% positive rate, mixed numeric/categorical
# columns, overlapping classes)

_BANK_JOBS = ["admin", "technician", "services", "management", "retired", "student"]
_BANK_JOB_P_NEG = [0.28, 0.22, 0.18, 0.18, 0.08, 0.06]
_BANK_JOB_P_POS = [0.18, 0.16, 0.10, 0.22, 0.17, 0.17]
_BANK_MARITAL = ["married", "single", "divorced"]
_BANK_MARITAL_P_NEG = [0.62, 0.26, 0.12]
_BANK_MARITAL_P_POS = [0.50, 0.38, 0.12]
_BANK_EDU = ["primary", "secondary", "tertiary", "unknown"]
_BANK_EDU_P_NEG = [0.17, 0.52, 0.27, 0.04]
_BANK_EDU_P_POS = [0.10, 0.42, 0.44, 0.04]


def bank_schema() -> dict[str, str]:
    return {
        "age": "numeric",
        "balance": "numeric",
        "duration": "numeric",
        "campaign": "numeric",
        "day": "numeric",
        "pdays": "numeric",
        "job": "categorical",
        "marital": "categorical",
        "education": "categorical",
        "subscribed": "label",
    }


def synthetic_bank_table(
    n_rows: int, seed: int, positive_rate: float = 0.11
) -> tuple[list[str], list[list[str]]]:
    """Generate a raw string table shaped like a telemarketing outcome CSV.

    Positives are a mixture of three customer profiles, each standing out
    along different columns (long calls, high balance, successful
    recontact). A model that sees the whole pool covers all three regions; a
    client holding only a handful of positives, or a linear model, cannot,
    which reproduces the weak-local / strong-federation gap seen on real
    campaign data.
    """
    if n_rows < 10:
        raise InputError("n_rows too small for a meaningful table")
    rng = np.random.default_rng(seed)
    y = (rng.random(n_rows) < positive_rate).astype(np.int64)
    if y[0] == 1:  # keep "no" as label id 0 (first appearance)
        first_neg = int(np.flatnonzero(y == 0)[0])
        y[0], y[first_neg] = 0, 1

    profile = np.where(y == 1, rng.choice(3, size=n_rows, p=[0.4, 0.35, 0.25]), -1)
    p0 = (profile == 0).astype(np.float64)  # responds to long calls
    p1 = (profile == 1).astype(np.float64)  # wealthy, older
    p2 = (profile == 2).astype(np.float64)  # warm recontact

    age = rng.normal(41 + 10 * p1, 10)
    balance = rng.normal(1100 + 300 * p0 + 3400 * p1, 1800)
    duration = np.maximum(rng.normal(210 + 430 * p0 + 90 * p1 + 110 * p2, 240), 1.0)
    campaign = np.maximum(rng.normal(2.8 - 1.8 * p2, 1.8), 1.0)
    day = rng.uniform(1, 31, n_rows)
    pdays = rng.normal(40 + 20 * p0 + 200 * p2, 90)

    def pick(cats, p_neg, p_pos):
        p = np.where(y[:, None] == 1, p_pos, p_neg)
        cum = np.cumsum(p, axis=1)
        u = rng.random(n_rows)[:, None]
        return [cats[k] for k in (u > cum).sum(axis=1)]

    job = pick(_BANK_JOBS, _BANK_JOB_P_NEG, _BANK_JOB_P_POS)
    marital = pick(_BANK_MARITAL, _BANK_MARITAL_P_NEG, _BANK_MARITAL_P_POS)
    education = pick(_BANK_EDU, _BANK_EDU_P_NEG, _BANK_EDU_P_POS)

    header = list(bank_schema().keys())
    rows = []
    for i in range(n_rows):
        rows.append(
            [
                f"{age[i]:.3f}",
                f"{balance[i]:.3f}",
                f"{duration[i]:.3f}",
                f"{campaign[i]:.3f}",
                f"{day[i]:.3f}",
                f"{pdays[i]:.3f}",
                job[i],
                marital[i],
                education[i],
                "yes" if y[i] == 1 else "no",
            ]
        )
    return header, rows


def synthetic_bank_dataset(n_rows: int, seed: int, positive_rate: float = 0.11) -> Dataset:
    header, rows = synthetic_bank_table(n_rows, seed, positive_rate)
    return encode_table(header, rows, bank_schema())


def write_bank_csv(path: str | Path, n_rows: int, seed: int, positive_rate: float = 0.11) -> None:
    header, rows = synthetic_bank_table(n_rows, seed, positive_rate)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
