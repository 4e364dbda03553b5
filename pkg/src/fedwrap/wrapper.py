"""Ensemble wrappers that federate an existing, already-trained classifier.

Stacking: every client trains one shared, architecture-identical translator
on its raw inputs concatenated with features from its own local model; the
translators are combined across clients by federated averaging.

Bagging: clients exchange serialized model snapshots and each client trains
a local linear fusion layer over all members' predicted probabilities.

The output aggregator blends local and federated probabilities; with weight
zero the wrapped system is exactly the original local model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import (
    ConfigError,
    FederationError,
    InputError,
    LifecycleError,
    UnsupportedModelError,
)
from .models import (
    KIND_LR,
    Model,
    ModelSpec,
    TrainHp,
    derive_seed,
    forward_batch,
    init_model,
    train_with_loss,
)

FEATURE_MODE_PROBS = "probs"
FEATURE_MODE_HIDDEN = "hidden"


@dataclass(frozen=True)
class FeatureMode:
    """What the stacking translator sees from the local model, besides raw x.

    probs: the probability vector (always n_classes wide, so any mix of local
    architectures yields one translator input width).
    hidden: the local feature vector zero-padded or truncated to `dim`.
    """

    kind: str = FEATURE_MODE_PROBS
    dim: int | None = None

    def __post_init__(self):
        if self.kind == FEATURE_MODE_PROBS:
            if self.dim is not None:
                raise ConfigError("probs mode takes no dimension")
        elif self.kind == FEATURE_MODE_HIDDEN:
            if self.dim is None or self.dim < 1:
                raise ConfigError("hidden mode requires a positive pad dimension")
        else:
            raise ConfigError(f"unknown feature mode {self.kind!r}")

    def width(self, n_classes: int) -> int:
        return n_classes if self.kind == FEATURE_MODE_PROBS else int(self.dim)  # type: ignore[arg-type]

    def __str__(self) -> str:
        return self.kind if self.kind == FEATURE_MODE_PROBS else f"hidden:{self.dim}"

    @classmethod
    def parse(cls, text: str) -> "FeatureMode":
        if text == FEATURE_MODE_PROBS:
            return cls()
        if text.startswith("hidden:"):
            try:
                return cls(kind=FEATURE_MODE_HIDDEN, dim=int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ConfigError(f"bad feature mode {text!r}") from exc
        raise ConfigError(f"bad feature mode {text!r}")


@dataclass
class LocalModelHandle:
    """Adapter around the client's existing model.

    predict_proba maps a feature matrix [n, in_dim] to probabilities [n, K].
    feature_vec is present only for parametric models that expose an internal
    feature vector; non-parametric models leave it None and can then only use
    probs mode. `core` carries the underlying kernel model when there is one,
    which lets the bagging strategy serialize it for peers.
    """

    predict_proba: Callable[[np.ndarray], np.ndarray]
    in_dim: int
    n_classes: int
    descriptor: str
    feature_vec: Callable[[np.ndarray], np.ndarray] | None = None
    core: Model | None = None


def handle_from_model(model: Model, descriptor: str | None = None) -> LocalModelHandle:
    """Wrap a kernel model as a local-model handle."""
    if descriptor is None:
        spec = model.spec
        descriptor = spec.kind if spec.kind == KIND_LR else f"{spec.kind}-{spec.hidden_dim}"
    return LocalModelHandle(
        predict_proba=lambda x: forward_batch(model, x).probs,
        feature_vec=lambda x: forward_batch(model, x).features,
        in_dim=model.spec.in_dim,
        n_classes=model.spec.n_classes,
        descriptor=descriptor,
        core=model,
    )


@dataclass
class WrapperConfig:
    local_model: LocalModelHandle
    train_dataset: Dataset
    translator: ModelSpec
    client_id: str
    clients: list[str]
    hp: TrainHp
    client_addr: tuple[str, int] = ("127.0.0.1", 0)
    server_addr: tuple[str, int] = ("127.0.0.1", 0)
    feature_mode: FeatureMode = field(default_factory=FeatureMode)
    threshold: float = 0.5
    fusion_weight: float = 0.5
    token: str = ""
    _stacked_cache: "Dataset | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.client_id in self.clients:
            raise ConfigError(f"client_id {self.client_id!r} also appears in clients")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")
        if not (0.0 <= self.fusion_weight <= 1.0):
            raise ConfigError(f"fusion_weight must be in [0,1], got {self.fusion_weight}")
        if self.translator.n_classes != self.train_dataset.n_classes:
            raise ConfigError(
                f"translator n_classes {self.translator.n_classes} != dataset "
                f"n_classes {self.train_dataset.n_classes}"
            )
        if self.local_model.in_dim != self.train_dataset.in_dim:
            raise ConfigError(
                f"local model in_dim {self.local_model.in_dim} != dataset "
                f"in_dim {self.train_dataset.in_dim}"
            )

    @property
    def stack_in_dim(self) -> int:
        return self.train_dataset.in_dim + self.feature_mode.width(
            self.train_dataset.n_classes
        )

    @property
    def roster(self) -> list[str]:
        return sorted([self.client_id] + list(self.clients))


def stacking_translator_spec(
    kind: str, raw_in_dim: int, n_classes: int, feature_mode: FeatureMode, hidden_dim: int | None = None
) -> ModelSpec:
    """Full translator spec with its input width = raw width + feature width."""
    return ModelSpec(
        kind=kind,
        in_dim=raw_in_dim + feature_mode.width(n_classes),
        n_classes=n_classes,
        hidden_dim=hidden_dim,
    )


@dataclass
class StackingState:
    translator: Model
    rounds_completed: int = 0
    finished: bool = False

    @property
    def stack_in_dim(self) -> int:
        return self.translator.spec.in_dim


@dataclass
class BaggingState:
    """Fusion over member model predictions, member order fixed and sorted.

    fusion is a linear map from the M*K concatenated member probabilities to
    K class scores; at initialization it is the block-wise (1/M) identity with
    zero bias, so the untrained fusion reproduces the plain member average.
    """

    member_ids: list[str]
    peer_models: dict[str, Model]
    fusion: Model
    trained: bool = False

    @property
    def n_classes(self) -> int:
        return self.fusion.spec.n_classes


# ---------------------------------------------------------------------------
# Stacking


def _local_features(cfg: WrapperConfig, x: np.ndarray) -> np.ndarray:
    mode = cfg.feature_mode
    if mode.kind == FEATURE_MODE_PROBS:
        return np.asarray(cfg.local_model.predict_proba(x), dtype=np.float64)
    if cfg.local_model.feature_vec is None:
        raise UnsupportedModelError(
            f"local model {cfg.local_model.descriptor!r} exposes no feature vector; "
            "hidden feature mode needs a parametric model"
        )
    f = np.asarray(cfg.local_model.feature_vec(x), dtype=np.float64)
    d = int(mode.dim)  # type: ignore[arg-type]
    if f.shape[1] >= d:
        return f[:, :d]
    return np.pad(f, ((0, 0), (0, d - f.shape[1])))


def build_stacking_inputs(cfg: WrapperConfig, x: np.ndarray) -> np.ndarray:
    """Extended translator inputs for a batch: raw rows ++ local-model features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.local_model.in_dim:
        raise InputError(f"input has shape {x.shape}, expected (n, {cfg.local_model.in_dim})")
    return np.concatenate([x, _local_features(cfg, x)], axis=1)


def build_stacking_input(cfg: WrapperConfig, x: np.ndarray) -> np.ndarray:
    """Single-vector form of build_stacking_inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a 1-d input vector, got shape {x.shape}")
    return build_stacking_inputs(cfg, x[None, :])[0]


def stacked_dataset(cfg: WrapperConfig) -> Dataset:
    # The extension is round-invariant (the local model is frozen), so it is
    # computed once per config and reused across training rounds.
    if cfg._stacked_cache is not None:
        return cfg._stacked_cache
    stacked = build_stacking_inputs(cfg, cfg.train_dataset.features)
    names = list(cfg.train_dataset.feature_names) + [
        f"stacked_{i}" for i in range(stacked.shape[1] - cfg.train_dataset.in_dim)
    ]
    cfg._stacked_cache = Dataset(
        features=stacked,
        labels=cfg.train_dataset.labels,
        n_classes=cfg.train_dataset.n_classes,
        feature_names=names,
    )
    return cfg._stacked_cache


def init_stacking_state(cfg: WrapperConfig) -> StackingState:
    spec = cfg.translator
    if spec.in_dim != cfg.stack_in_dim:
        raise ConfigError(
            f"translator in_dim {spec.in_dim} != raw + feature width {cfg.stack_in_dim}"
        )
    return StackingState(translator=init_model(spec, seed=derive_seed(cfg.hp.seed, "translator")))


def _check_params_shape(spec: ModelSpec, params: list[np.ndarray]) -> list[np.ndarray]:
    shapes = spec.block_shapes()
    if len(params) != len(shapes):
        raise FederationError(
            f"got {len(params)} parameter blocks, translator spec has {len(shapes)}; "
            "translators must be architecture-identical across clients"
        )
    out = []
    for p, shape in zip(params, shapes):
        arr = np.asarray(p, dtype=np.float64)
        if arr.shape != shape:
            raise FederationError(
                f"parameter block shape {arr.shape} != translator spec {shape}; "
                "translators must be architecture-identical across clients"
            )
        out.append(arr)
    return out


def stacking_train_round(
    state: StackingState, cfg: WrapperConfig, global_params: list[np.ndarray]
) -> tuple[list[np.ndarray], int, float]:
    """One local phase: load the broadcast translator parameters, train on the
    stacked inputs, and hand back (updated params, sample count, mean loss).

    The per-round shuffle seed depends only on (hp.seed, round index), so a
    federation of clients holding identical data produces identical updates.
    """
    params = _check_params_shape(state.translator.spec, global_params)
    round_idx = state.rounds_completed + 1
    model = Model(spec=state.translator.spec, params=params, rng_seed=state.translator.rng_seed)
    hp = TrainHp(
        learning_rate=cfg.hp.learning_rate,
        batch_size=cfg.hp.batch_size,
        local_epochs=cfg.hp.local_epochs,
        l2=cfg.hp.l2,
        seed=derive_seed(cfg.hp.seed, "round", round_idx),
    )
    trained, loss = train_with_loss(model, stacked_dataset(cfg), hp)
    state.translator = trained
    state.rounds_completed = round_idx
    return trained.params, cfg.train_dataset.n_rows, loss


def load_final_params(state: StackingState, final_params: list[np.ndarray]) -> None:
    """Install the last aggregated translator and mark the state usable."""
    params = _check_params_shape(state.translator.spec, final_params)
    state.translator = Model(
        spec=state.translator.spec, params=params, rng_seed=state.translator.rng_seed
    )
    state.finished = True


def stacking_predict_batch(state: StackingState, cfg: WrapperConfig, x: np.ndarray) -> np.ndarray:
    return forward_batch(state.translator, build_stacking_inputs(cfg, x)).probs


def stacking_predict(state: StackingState, cfg: WrapperConfig, x: np.ndarray) -> np.ndarray:
    """Federated-model probabilities: translator forward on the extended input."""
    return stacking_predict_batch(state, cfg, np.asarray(x)[None, :])[0]


# ---------------------------------------------------------------------------
# Bagging


def _averaging_fusion(member_count: int, n_classes: int) -> Model:
    spec = ModelSpec(kind=KIND_LR, in_dim=member_count * n_classes, n_classes=n_classes)
    w = np.tile(np.eye(n_classes) / member_count, member_count)
    return Model(spec=spec, params=[w, np.zeros(n_classes)], rng_seed=0)


def _member_probs(state: BaggingState, x: np.ndarray) -> np.ndarray:
    cols = [forward_batch(state.peer_models[mid], x).probs for mid in state.member_ids]
    return np.concatenate(cols, axis=1)


def bagging_init(cfg: WrapperConfig, peer_models: dict[str, Model]) -> BaggingState:
    """Assemble the member set (own model included) with the untrained
    averaging fusion: prediction equals the plain mean of member outputs."""
    if not peer_models:
        raise InputError("need at least one member model")
    n_classes = cfg.train_dataset.n_classes
    for mid, model in peer_models.items():
        if model.spec.n_classes != n_classes:
            raise FederationError(
                f"member {mid!r} predicts {model.spec.n_classes} classes, task has {n_classes}"
            )
        if model.spec.in_dim != cfg.train_dataset.in_dim:
            raise FederationError(
                f"member {mid!r} expects in_dim {model.spec.in_dim}, data has "
                f"{cfg.train_dataset.in_dim}"
            )
    member_ids = sorted(peer_models)
    return BaggingState(
        member_ids=member_ids,
        peer_models=dict(peer_models),
        fusion=_averaging_fusion(len(member_ids), n_classes),
    )


def bagging_fit(cfg: WrapperConfig, peer_models: dict[str, Model]) -> BaggingState:
    """Train the linear fusion by SGD cross-entropy on the local training set,
    starting from the averaging map. Deterministic for a fixed hp.seed."""
    state = bagging_init(cfg, peer_models)
    inputs = _member_probs(state, cfg.train_dataset.features)
    fusion_data = Dataset(
        features=inputs,
        labels=cfg.train_dataset.labels,
        n_classes=cfg.train_dataset.n_classes,
        feature_names=[f"m{mid}_p{c}" for mid in state.member_ids for c in range(state.n_classes)],
    )
    hp = TrainHp(
        learning_rate=cfg.hp.learning_rate,
        batch_size=cfg.hp.batch_size,
        local_epochs=cfg.hp.local_epochs,
        l2=cfg.hp.l2,
        seed=derive_seed(cfg.hp.seed, "fusion"),
    )
    fusion, _ = train_with_loss(state.fusion, fusion_data, hp)
    state.fusion = fusion
    state.trained = True
    return state


def bagging_predict_batch(state: BaggingState, x: np.ndarray) -> np.ndarray:
    """Fusion scores renormalized onto the simplex.

    The fusion map emits one score per class; scores are clipped at zero and
    divided by their sum (uniform if nothing is positive). Renormalization is
    exact on the untrained averaging map, which is what makes the
    mean-of-members initialization law hold to float precision.
    """
    x = np.asarray(x, dtype=np.float64)
    w, b = state.fusion.params
    scores = _member_probs(state, x) @ w.T + b
    scores = np.maximum(scores, 0.0)
    totals = scores.sum(axis=1, keepdims=True)
    uniform = np.full_like(scores, 1.0 / state.n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, scores / np.where(totals > 0, totals, 1.0), uniform)
    return probs


def bagging_predict(state: BaggingState, x: np.ndarray) -> np.ndarray:
    return bagging_predict_batch(state, np.asarray(x)[None, :])[0]


# ---------------------------------------------------------------------------
# Output aggregation and wrapped inference


def _check_prob_vector(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-9) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise InputError(f"{name} is not a valid probability vector: {p}")
    return p


def aggregate_outputs(
    local_probs: np.ndarray, federated_probs: np.ndarray, fusion_weight: float
) -> np.ndarray:
    """Convex blend w*federated + (1-w)*local.

    The endpoints short-circuit: w=0 returns the local vector itself and w=1
    the federated one, which is the pluggability guarantee (the wrapped system
    can always be collapsed back to the original model, bit for bit).
    """
    local_probs = np.asarray(local_probs, dtype=np.float64)
    federated_probs = np.asarray(federated_probs, dtype=np.float64)
    if local_probs.shape != federated_probs.shape:
        raise InputError(
            f"probability shapes differ: {local_probs.shape} vs {federated_probs.shape}"
        )
    if not (0.0 <= fusion_weight <= 1.0):
        raise InputError(f"fusion_weight must be in [0,1], got {fusion_weight}")
    _check_prob_vector(local_probs, "local_probs")
    _check_prob_vector(federated_probs, "federated_probs")
    if fusion_weight == 0.0:
        return local_probs.copy()
    if fusion_weight == 1.0:
        return federated_probs.copy()
    return fusion_weight * federated_probs + (1.0 - fusion_weight) * local_probs


def decide_labels(probs: np.ndarray, n_classes: int, threshold: float) -> np.ndarray:
    """Binary: label 1 iff the positive probability is >= threshold.
    Multi-class: argmax with lowest-index tie-break."""
    probs = np.atleast_2d(probs)
    if n_classes == 2:
        return (probs[:, 1] >= threshold).astype(np.int64)
    return np.argmax(probs, axis=1).astype(np.int64)


def federated_predict_batch(cfg: WrapperConfig, state, x: np.ndarray) -> np.ndarray:
    if isinstance(state, StackingState):
        return stacking_predict_batch(state, cfg, x)
    if isinstance(state, BaggingState):
        return bagging_predict_batch(state, x)
    raise InputError(f"unknown wrapper state type {type(state).__name__}")


def wrapper_infer_batch(
    cfg: WrapperConfig, state, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated probabilities and decisions for a batch; same interface
    shape as querying the local model directly."""
    if isinstance(state, StackingState):
        if state.rounds_completed == 0 and not state.finished:
            raise LifecycleError("stacking wrapper has not completed any training round")
    elif isinstance(state, BaggingState):
        if not state.trained:
            raise LifecycleError("bagging fusion has not been fitted")
    else:
        raise InputError(f"unknown wrapper state type {type(state).__name__}")
    x = np.asarray(x, dtype=np.float64)
    local = np.asarray(cfg.local_model.predict_proba(x), dtype=np.float64)
    if cfg.fusion_weight == 0.0:
        probs = local  # exact endpoint: the original model, untouched
    else:
        fed = federated_predict_batch(cfg, state, x)
        if cfg.fusion_weight == 1.0:
            probs = fed
        else:
            probs = cfg.fusion_weight * fed + (1.0 - cfg.fusion_weight) * local
    return probs, decide_labels(probs, cfg.train_dataset.n_classes, cfg.threshold)


def wrapper_infer(cfg: WrapperConfig, state, x: np.ndarray) -> tuple[np.ndarray, int]:
    probs, labels = wrapper_infer_batch(cfg, state, np.asarray(x)[None, :])
    return probs[0], int(labels[0])
