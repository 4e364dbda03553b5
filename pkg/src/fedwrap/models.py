"""Minimal parametric-model engine: logistic regression and three-hidden-layer
MLPs with exact hand-derived gradients, mini-batch SGD, and feature-vector
extraction for the stacking wrapper.

Models are plain values: every operation returns a new model and never
mutates its inputs, so instances can be shared freely across threads.
All math runs in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DecodeError, DivergenceError, InputError

KIND_LR = "lr"
KIND_MLP3 = "mlp3"

# Model byte format: magic, then big-endian u16 format version, then a
# u32-length-prefixed UTF-8 JSON header, then each block as f64 little-endian
# in header order.
MODEL_MAGIC = b"FWM1"
MODEL_FORMAT_VERSION = 1


def derive_seed(base: int, *parts: object) -> int:
    """Stable 63-bit seed derived from a base seed and context labels.

    Hash-based so that (seed, round) and (seed, "local", client_id) streams
    never collide across platforms or runs.
    """
    h = hashlib.sha256(repr((int(base),) + parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the parameter layout is a pure function of it."""

    kind: str
    in_dim: int
    n_classes: int
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.kind not in (KIND_LR, KIND_MLP3):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.in_dim < 1:
            raise ConfigError(f"in_dim must be >= 1, got {self.in_dim}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.kind == KIND_MLP3:
            if self.hidden_dim is None or self.hidden_dim < 1:
                raise ConfigError(f"mlp3 requires hidden_dim >= 1, got {self.hidden_dim}")
        elif self.hidden_dim is not None:
            raise ConfigError("hidden_dim is only valid for mlp3")

    def block_names(self) -> list[str]:
        if self.kind == KIND_LR:
            return ["w", "b"]
        return ["w1", "b1", "w2", "b2", "w3", "b3", "w_out", "b_out"]

    def block_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == KIND_LR:
            return [(self.n_classes, self.in_dim), (self.n_classes,)]
        h = self.hidden_dim
        assert h is not None
        return [
            (h, self.in_dim), (h,),
            (h, h), (h,),
            (h, h), (h,),
            (self.n_classes, h), (self.n_classes,),
        ]

    def weight_block_flags(self) -> list[bool]:
        """True for weight matrices (L2-regularized), False for bias vectors."""
        return [len(s) == 2 for s in self.block_shapes()]

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.block_shapes())

    def feature_dim(self) -> int:
        """Width of the feature vector exposed to the stacking translator."""
        return self.n_classes if self.kind == KIND_LR else int(self.hidden_dim)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                kind=d["kind"],
                in_dim=int(d["in_dim"]),
                n_classes=int(d["n_classes"]),
                hidden_dim=None if d.get("hidden_dim") is None else int(d["hidden_dim"]),
            )
        except KeyError as exc:
            raise ConfigError(f"model spec missing field {exc}") from exc


@dataclass
class Model:
    """A parametric classifier: spec plus ordered named parameter blocks."""

    spec: ModelSpec
    params: list[np.ndarray]
    rng_seed: int = 0

    def __post_init__(self):
        shapes = self.spec.block_shapes()
        if len(self.params) != len(shapes):
            raise ConfigError(
                f"expected {len(shapes)} parameter blocks, got {len(self.params)}"
            )
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
        for name, p, shape in zip(self.spec.block_names(), self.params, shapes):
            if p.shape != shape:
                raise ConfigError(f"block {name!r} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise ConfigError(f"block {name!r} contains non-finite values")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.rng_seed == other.rng_seed
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class TrainHp:
    """SGD hyperparameters. learning_rate = 0 is allowed and means "no step":
    several coordination contracts rely on a zero-step run returning its
    input parameters bit-for-bit."""

    learning_rate: float
    batch_size: int
    local_epochs: int
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic initialization: Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: list[np.ndarray] = []
    for shape, is_weight in zip(spec.block_shapes(), spec.weight_block_flags()):
        if is_weight:
            fan_out, fan_in = shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-s, s, size=shape))
        else:
            params.append(np.zeros(shape))
    return Model(spec=spec, params=params, rng_seed=int(seed))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; finite logits never produce NaN."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward_internals(model: Model, x: np.ndarray):
    """Return (logits, features, hidden_cache) for a batch [n, in_dim]."""
    if model.spec.kind == KIND_LR:
        w, b = model.params
        logits = x @ w.T + b
        return logits, logits, None
    w1, b1, w2, b2, w3, b3, wo, bo = model.params
    z1 = x @ w1.T + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2.T + b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ w3.T + b3
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ wo.T + bo
    return logits, a3, (a1, a2, a3)


def _check_batch_x(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.in_dim:
        raise InputError(
            f"input has shape {x.shape}, expected (n, {model.spec.in_dim})"
        )
    if not np.all(np.isfinite(x)):
        raise InputError("input contains non-finite values")
    return x


def forward_batch(model: Model, x: np.ndarray) -> ForwardResult:
    """Vectorized forward over a batch [n, in_dim]."""
    x = _check_batch_x(model, x)
    logits, features, _ = _forward_internals(model, x)
    return ForwardResult(logits=logits, probs=softmax(logits), features=features)


def forward(model: Model, x: np.ndarray) -> ForwardResult:
    """Forward pass for a single input vector.

    `features` is what the stacking translator consumes: the last hidden
    post-ReLU activation for MLPs, the logit vector for LR.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a 1-d input vector, got shape {x.shape}")
    r = forward_batch(model, x[None, :])
    return ForwardResult(logits=r.logits[0], probs=r.probs[0], features=r.features[0])


def _as_batch(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept either (X, y) arrays or a list of (x, label) pairs."""
    if isinstance(batch, tuple) and len(batch) == 2:
        x, y = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise InputError("empty batch")
        x = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        y = np.array([p[1] for p in pairs])
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim == 1:
        x = x[None, :]
        y = np.atleast_1d(y)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    if y.shape != (x.shape[0],):
        raise InputError(f"labels have shape {y.shape}, expected ({x.shape[0]},)")
    if np.any(y < 0) or np.any(y >= model.spec.n_classes):
        raise InputError("labels out of range")
    return _check_batch_x(model, x), y.astype(np.int64)


def batch_loss(model: Model, batch, l2: float = 0.0) -> float:
    """Mean cross-entropy over the batch plus l2/2 * sum of squared weights
    (biases unregularized). This is the exact objective `grad` differentiates.
    """
    x, y = _as_batch(model, batch)
    # overflow here is a legitimate outcome (divergent training); the caller
    # detects the resulting non-finite loss rather than warning about it
    with np.errstate(over="ignore", invalid="ignore"):
        logits, _, _ = _forward_internals(model, x)
        z = logits - np.max(logits, axis=1, keepdims=True)
        log_probs = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        ce = -float(np.mean(log_probs[np.arange(len(y)), y]))
        if l2 > 0:
            reg = sum(
                float(np.sum(p * p))
                for p, is_w in zip(model.params, model.spec.weight_block_flags())
                if is_w
            )
            ce += 0.5 * l2 * reg
    return ce


def grad(model: Model, batch, l2: float = 0.0) -> list[np.ndarray]:
    """Exact analytic gradient of `batch_loss`, one block per model block."""
    x, y = _as_batch(model, batch)
    n = x.shape[0]
    logits, _, cache = _forward_internals(model, x)
    delta = softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    if model.spec.kind == KIND_LR:
        w, _ = model.params
        gw = delta.T @ x
        gb = delta.sum(axis=0)
        if l2 > 0:
            gw = gw + l2 * w
        return [gw, gb]

    w1, b1, w2, b2, w3, b3, wo, bo = model.params
    a1, a2, a3 = cache
    gwo = delta.T @ a3
    gbo = delta.sum(axis=0)
    d3 = (delta @ wo) * (a3 > 0)
    gw3 = d3.T @ a2
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ w3) * (a2 > 0)
    gw2 = d2.T @ a1
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ w2) * (a1 > 0)
    gw1 = d1.T @ x
    gb1 = d1.sum(axis=0)
    grads = [gw1, gb1, gw2, gb2, gw3, gb3, gwo, gbo]
    if l2 > 0:
        flags = model.spec.weight_block_flags()
        grads = [g + l2 * p if is_w else g for g, p, is_w in zip(grads, model.params, flags)]
    return grads


def train_with_loss(model: Model, data, hp: TrainHp) -> tuple[Model, float]:
    """Mini-batch SGD with seeded shuffling; returns (new model, mean batch loss).

    Deterministic for fixed (model, data, hp). The input model is not mutated.
    """
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    if x.shape[0] == 0:
        raise InputError("training data is empty")
    if x.shape[1] != model.spec.in_dim:
        raise InputError(
            f"data in_dim {x.shape[1]} != model in_dim {model.spec.in_dim}"
        )
    rng = np.random.default_rng(hp.seed)
    params = [p.copy() for p in model.params]
    work = Model(spec=model.spec, params=params, rng_seed=model.rng_seed)
    losses: list[float] = []
    n = x.shape[0]
    for epoch in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            bx, by = x[idx], y[idx]
            loss = batch_loss(work, (bx, by), l2=hp.l2)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // hp.batch_size}"
                )
            losses.append(loss)
            if hp.learning_rate != 0.0:
                with np.errstate(over="ignore", invalid="ignore"):
                    g = grad(work, (bx, by), l2=hp.l2)
                    for p, gp in zip(work.params, g):
                        p -= hp.learning_rate * gp
    return work, float(np.mean(losses))


def sgd_train(model: Model, data, hp: TrainHp) -> Model:
    """Train `model` on `data` for hp.local_epochs epochs of mini-batch SGD."""
    trained, _ = train_with_loss(model, data, hp)
    return trained


def serialize_model(model: Model) -> bytes:
    header = {
        "kind": model.spec.kind,
        "in_dim": model.spec.in_dim,
        "hidden_dim": model.spec.hidden_dim,
        "n_classes": model.spec.n_classes,
        "block_names": model.spec.block_names(),
        "block_shapes": [list(s) for s in model.spec.block_shapes()],
        "rng_seed": model.rng_seed,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack(">H", MODEL_FORMAT_VERSION)
    out += struct.pack(">I", len(hbytes))
    out += hbytes
    for p in model.params:
        out += np.ascontiguousarray(p, dtype="<f8").tobytes()
    return bytes(out)


def deserialize_model(raw: bytes) -> Model:
    """Inverse of serialize_model; raises DecodeError on any malformation."""
    if len(raw) < 10:
        raise DecodeError("model bytes truncated before header")
    if raw[:4] != MODEL_MAGIC:
        raise DecodeError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack(">H", raw[4:6])
    if version != MODEL_FORMAT_VERSION:
        raise DecodeError(
            f"format version mismatch: got {version}, support {MODEL_FORMAT_VERSION}"
        )
    (hlen,) = struct.unpack(">I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise DecodeError("model bytes truncated inside header")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"bad model header: {exc}") from exc
    try:
        spec = ModelSpec.from_dict(header)
        shapes = [tuple(s) for s in header["block_shapes"]]
        names = list(header["block_names"])
        rng_seed = int(header.get("rng_seed", 0))
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad model header: {exc}") from exc
    if shapes != spec.block_shapes() or names != spec.block_names():
        raise DecodeError("header block layout does not match the declared spec")
    params: list[np.ndarray] = []
    pos = 10 + hlen
    for shape in shapes:
        count = int(np.prod(shape))
        end = pos + 8 * count
        if len(raw) < end:
            raise DecodeError("model bytes truncated inside parameter blocks")
        params.append(np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).copy())
        pos = end
    if pos != len(raw):
        raise DecodeError(f"{len(raw) - pos} trailing bytes after parameter blocks")
    try:
        return Model(spec=spec, params=params, rng_seed=rng_seed)
    except ConfigError as exc:
        raise DecodeError(str(exc)) from exc
