"""Federated averaging and the round-loop state machine.

The same RoundLoop drives the in-process simulator, the live socket server,
and the from-scratch baseline: broadcast global parameters, collect one
update per expected client, aggregate, repeat. Aggregation always sums in
sorted-client-id order, so results are bitwise reproducible no matter how
updates arrived.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Partition
from .errors import FederationError, InputError, RoundTimeoutError
from .models import Model, ModelSpec, TrainHp, derive_seed, forward_batch, init_model, train_with_loss
from .wrapper import decide_labels

MODE_STACKING = "stacking"
MODE_BAGGING = "bagging"

DEFAULT_TIMEOUT_MS = 30_000


@dataclass
class ClientUpdate:
    client_id: str
    round: int
    params: list[np.ndarray]
    n_samples: int
    loss: float = float("nan")

    def __post_init__(self):
        if self.round < 1:
            raise InputError(f"round must be >= 1, got {self.round}")
        if self.n_samples < 1:
            raise InputError(f"n_samples must be >= 1, got {self.n_samples}")
        self.params = [np.asarray(p, dtype=np.float64) for p in self.params]


@dataclass(frozen=True)
class FederationPlan:
    rounds: int
    expected_clients: tuple[str, ...]
    translator_spec: ModelSpec
    hp: TrainHp
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    mode: str = MODE_STACKING

    def __post_init__(self):
        if self.rounds < 1:
            raise InputError(f"rounds must be >= 1, got {self.rounds}")
        if not self.expected_clients:
            raise InputError("expected_clients must be non-empty")
        if len(set(self.expected_clients)) != len(self.expected_clients):
            raise InputError("expected_clients contains duplicates")
        if self.timeout_ms < 1:
            raise InputError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.mode not in (MODE_STACKING, MODE_BAGGING):
            raise InputError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "expected_clients", tuple(sorted(self.expected_clients)))


def fedavg_aggregate(updates: list[ClientUpdate]) -> list[np.ndarray]:
    """Blockwise mean weighted by sample counts.

    Summation order is fixed by sorting on client_id, which makes the result
    independent of the order updates were collected in, bit for bit.
    """
    if not updates:
        raise FederationError("no updates to aggregate")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise FederationError(f"duplicate client ids in updates: {sorted(ids)}")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise FederationError(f"updates span multiple rounds: {sorted(rounds)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shapes = [p.shape for p in ordered[0].params]
    for u in ordered[1:]:
        if [p.shape for p in u.params] != shapes:
            raise FederationError(
                f"client {u.client_id!r} sent parameter shapes "
                f"{[p.shape for p in u.params]}, expected {shapes}"
            )
    total = float(sum(u.n_samples for u in ordered))
    out = [np.zeros(s) for s in shapes]
    for u in ordered:
        w = u.n_samples / total
        for acc, p in zip(out, u.params):
            acc += w * p
    return out


@dataclass
class RoundLogRow:
    round: int
    elapsed_ms: float
    mean_client_loss: float
    test_accuracy: float | None = None


def round_log_csv(rows: list[RoundLogRow]) -> str:
    lines = ["round,elapsed_ms,mean_client_loss,test_accuracy"]
    for r in rows:
        acc = "" if r.test_accuracy is None else f"{r.test_accuracy:.6f}"
        lines.append(f"{r.round},{r.elapsed_ms:.3f},{r.mean_client_loss:.6f},{acc}")
    return "\n".join(lines) + "\n"


class RoundLoop:
    """Round bookkeeping shared by the live server and the simulator.

    One logical owner mutates it (single-writer); per-round wall time is
    measured from round open to the start of aggregation, so evaluation
    callbacks never pollute the timing trace.
    """

    def __init__(self, plan: FederationPlan, initial_params: list[np.ndarray]):
        self.plan = plan
        self.global_params = [np.asarray(p, dtype=np.float64) for p in initial_params]
        self.current_round = 1
        self.done = False
        self.log: list[RoundLogRow] = []
        self._pending: dict[str, ClientUpdate] = {}
        self._opened_at = time.perf_counter()

    def missing(self) -> list[str]:
        return [c for c in self.plan.expected_clients if c not in self._pending]

    def ready(self) -> bool:
        return not self.done and not self.missing()

    def offer(self, update: ClientUpdate) -> None:
        if self.done:
            raise FederationError("federation already finished")
        if update.client_id not in self.plan.expected_clients:
            raise FederationError(f"unexpected client {update.client_id!r}")
        if update.round != self.current_round:
            raise FederationError(
                f"client {update.client_id!r} sent round {update.round}, "
                f"server is in round {self.current_round}"
            )
        if update.client_id in self._pending:
            raise FederationError(f"duplicate update from {update.client_id!r}")
        self._pending[update.client_id] = update

    def timeout_check(self) -> None:
        """Raise if the open round has outlived plan.timeout_ms."""
        elapsed_ms = (time.perf_counter() - self._opened_at) * 1000.0
        if elapsed_ms > self.plan.timeout_ms and self.missing():
            raise RoundTimeoutError(
                f"round {self.current_round} timed out after {self.plan.timeout_ms} ms; "
                f"missing updates from {self.missing()}",
                missing=tuple(self.missing()),
            )

    def close_round(self, evaluate=None) -> tuple[list[np.ndarray], bool]:
        """Aggregate the collected round; returns (new global params, done)."""
        if self.missing():
            raise RoundTimeoutError(
                f"round {self.current_round} is missing updates from {self.missing()}",
                missing=tuple(self.missing()),
            )
        elapsed_ms = (time.perf_counter() - self._opened_at) * 1000.0
        updates = list(self._pending.values())
        self.global_params = fedavg_aggregate(updates)
        losses = [u.loss for u in updates if np.isfinite(u.loss)]
        row = RoundLogRow(
            round=self.current_round,
            elapsed_ms=elapsed_ms,
            mean_client_loss=float(np.mean(losses)) if losses else float("nan"),
            test_accuracy=None if evaluate is None else float(evaluate(self.global_params)),
        )
        self.log.append(row)
        self._pending.clear()
        if self.current_round >= self.plan.rounds:
            self.done = True
        else:
            self.current_round += 1
            self._opened_at = time.perf_counter()
        return self.global_params, self.done


def run_round_loop(
    plan: FederationPlan,
    client_driver,
    initial_params: list[np.ndarray] | None = None,
    evaluate=None,
) -> tuple[list[np.ndarray], list[RoundLogRow]]:
    """Drive the full federation in-process.

    client_driver(client_id, round_idx, global_params) -> ClientUpdate is
    invoked for every expected client in sorted-id order each round.
    """
    if initial_params is None:
        initial_params = init_model(plan.translator_spec, seed=plan.hp.seed).params
    loop = RoundLoop(plan, initial_params)
    while not loop.done:
        for cid in plan.expected_clients:
            loop.offer(client_driver(cid, loop.current_round, loop.global_params))
        loop.close_round(evaluate)
    return loop.global_params, loop.log


@dataclass
class FromScratchResult:
    model: Model
    trace: list[tuple[float, float]] = field(default_factory=list)  # (cumulative ms, accuracy)
    log: list[RoundLogRow] = field(default_factory=list)


def fedavg_from_scratch(partition: Partition, spec: ModelSpec, plan: FederationPlan) -> FromScratchResult:
    """Classic federated averaging from random initialization.

    No pre-trained local models are reused: each round every client trains a
    fresh copy of the current global model on its own shard. The trace holds
    one (cumulative training wall-clock ms, test accuracy) point per round
    for training-cost comparisons against the wrapper pipeline.
    """
    if spec.in_dim != partition.test_set.in_dim:
        raise InputError(
            f"model in_dim {spec.in_dim} != data in_dim {partition.test_set.in_dim}"
        )
    if len(partition.client_datasets) != len(plan.expected_clients):
        raise InputError(
            f"partition has {len(partition.client_datasets)} clients, plan expects "
            f"{len(plan.expected_clients)}"
        )
    shards = dict(zip(plan.expected_clients, partition.client_datasets))

    def driver(cid: str, round_idx: int, global_params: list[np.ndarray]) -> ClientUpdate:
        model = Model(spec=spec, params=[p.copy() for p in global_params], rng_seed=plan.hp.seed)
        hp = TrainHp(
            learning_rate=plan.hp.learning_rate,
            batch_size=plan.hp.batch_size,
            local_epochs=plan.hp.local_epochs,
            l2=plan.hp.l2,
            seed=derive_seed(plan.hp.seed, "round", round_idx),
        )
        trained, loss = train_with_loss(model, shards[cid], hp)
        return ClientUpdate(
            client_id=cid,
            round=round_idx,
            params=trained.params,
            n_samples=shards[cid].n_rows,
            loss=loss,
        )

    test = partition.test_set

    def evaluate(params: list[np.ndarray]) -> float:
        model = Model(spec=spec, params=params, rng_seed=plan.hp.seed)
        probs = forward_batch(model, test.features).probs
        pred = decide_labels(probs, test.n_classes, 0.5)
        return float(np.mean(pred == test.labels))

    final_params, log = run_round_loop(plan, driver, evaluate=evaluate)
    cumulative = 0.0
    trace = []
    for row in log:
        cumulative += row.elapsed_ms
        trace.append((cumulative, row.test_accuracy if row.test_accuracy is not None else 0.0))
    return FromScratchResult(
        model=Model(spec=spec, params=final_params, rng_seed=plan.hp.seed),
        trace=trace,
        log=log,
    )
