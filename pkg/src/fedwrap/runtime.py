"""Live socket runtime and the deterministic in-process simulator.

Both paths drive the exact ServerProtocol / ClientSession state machines and
push every message through the framed encoder, so a live federation over
loopback sockets and a simulated one with the same seeds produce identical
final parameters.

Server concurrency: one thread per client connection, but every protocol
mutation and every socket write happens under one lock (single-writer
contract); the protocol machine itself is never touched concurrently.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import Partition
from .errors import FederationError, ProtocolError, RoundTimeoutError, TransportError
from .federation import MODE_BAGGING, MODE_STACKING, FederationPlan
from .metrics import MetricsReport, confusion, default_task, metrics_from_confusion
from .models import Model, ModelSpec, TrainHp, derive_seed, init_model, sgd_train
from .protocol import (
    ACT_CLOSE,
    ACT_FINISHED,
    ACT_SEND,
    ClientSession,
    FederationResult,
    FrameDecoder,
    KIND_ERROR,
    Message,
    ServerProtocol,
    decode_body,
    encode,
)
from .wrapper import (
    WrapperConfig,
    FeatureMode,
    decide_labels,
    federated_predict_batch,
    handle_from_model,
    stacking_translator_spec,
    wrapper_infer_batch,
)

_RECV_CHUNK = 65536


# ---------------------------------------------------------------------------
# Live server


class _LiveServer:
    def __init__(self, plan: FederationPlan, token: str, stop_event: threading.Event | None):
        self.proto = ServerProtocol(plan, token=token)
        self.token = token
        self.lock = threading.Lock()
        self.conns: dict[int, socket.socket] = {}
        self.result: FederationResult | None = None
        self.failure: BaseException | None = None
        self.finished = threading.Event()
        self.stop_event = stop_event or threading.Event()
        self._next_key = 0

    def execute(self, actions) -> None:
        """Run protocol actions; caller must hold the lock."""
        for action in actions:
            if action[0] == ACT_SEND:
                _, key, msg = action
                sock = self.conns.get(key)
                if sock is not None:
                    try:
                        sock.sendall(encode(msg))
                    except OSError:
                        pass
            elif action[0] == ACT_CLOSE:
                key = action[1]
                sock = self.conns.pop(key, None)
                self.proto.drop_connection(key)
                if sock is not None:
                    try:
                        sock.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass
                    sock.close()
            elif action[0] == ACT_FINISHED:
                self.result = action[2]
                self.finished.set()

    def broadcast_error(self, text: str) -> None:
        with self.lock:
            msg = Message(kind=KIND_ERROR, sender="server", token=self.token, payload={"text": text})
            for sock in self.conns.values():
                try:
                    sock.sendall(encode(msg))
                except OSError:
                    pass

    def handle_connection(self, key: int, sock: socket.socket) -> None:
        decoder = FrameDecoder()
        try:
            while not self.finished.is_set():
                try:
                    data = sock.recv(_RECV_CHUNK)
                except (OSError, ValueError):
                    break
                if not data:
                    break
                try:
                    bodies = decoder.feed(data)
                except ProtocolError:
                    break
                for body in bodies:
                    with self.lock:
                        if key not in self.conns:
                            return
                        self.execute(self.proto.handle_frame(key, body))
        finally:
            with self.lock:
                if key in self.conns and not self.finished.is_set():
                    self.proto.drop_connection(key)


def serve(
    bind_addr: tuple[str, int],
    plan: FederationPlan,
    token: str = "",
    stop_event: threading.Event | None = None,
    registration_timeout_ms: int | None = None,
) -> FederationResult:
    """Run one federation as the coordinator; blocks until Done or failure.

    Raises TransportError if the port cannot be bound, RoundTimeoutError when
    the roster or a round times out, and InterruptedError after stop_event is
    set (an Error frame is broadcast first in both failure cases).
    """
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind(tuple(bind_addr))
    except OSError as exc:
        listener.close()
        raise TransportError(f"cannot bind {bind_addr}: {exc}") from exc
    listener.listen(len(plan.expected_clients) + 4)
    listener.settimeout(0.1)

    server = _LiveServer(plan, token, stop_event)
    reg_deadline = time.perf_counter() + (
        (registration_timeout_ms if registration_timeout_ms is not None else plan.timeout_ms)
        / 1000.0
    )
    threads: list[threading.Thread] = []
    try:
        while not server.finished.is_set():
            if server.stop_event.is_set():
                server.broadcast_error("interrupted")
                raise InterruptedError("federation interrupted")
            with server.lock:
                if not server.proto.roster_complete and time.perf_counter() > reg_deadline:
                    missing = server.proto.registration_missing()
                    server.execute(
                        [
                            (
                                ACT_SEND,
                                key,
                                Message(
                                    kind=KIND_ERROR,
                                    sender="server",
                                    token=token,
                                    payload={"text": f"roster incomplete: missing {missing}"},
                                ),
                            )
                            for key in list(server.conns)
                        ]
                    )
                    raise RoundTimeoutError(
                        f"registration timed out; missing clients {missing}",
                        missing=tuple(missing),
                    )
                try:
                    server.proto.timeout_check()
                except RoundTimeoutError as exc:
                    server.broadcast_error(str(exc))
                    raise
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with server.lock:
                key = server._next_key
                server._next_key += 1
                server.conns[key] = sock
            t = threading.Thread(target=server.handle_connection, args=(key, sock), daemon=True)
            t.start()
            threads.append(t)
        assert server.result is not None
        return server.result
    finally:
        listener.close()
        with server.lock:
            for sock in server.conns.values():
                try:
                    sock.close()
                except OSError:
                    pass
            server.conns.clear()


# ---------------------------------------------------------------------------
# Live client


def join(
    cfg: WrapperConfig,
    mode: str,
    connect_timeout_s: float = 10.0,
    recv_timeout_s: float = 120.0,
):
    """Join a running federation; returns the trained wrapper state.

    Connection loss or recv timeout raises TransportError naming the round in
    flight; the wrapper state is only returned once training fully finished.
    """
    session = ClientSession(cfg, mode)
    try:
        sock = socket.create_connection(tuple(cfg.server_addr), timeout=connect_timeout_s)
    except OSError as exc:
        raise TransportError(f"cannot reach server at {cfg.server_addr}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(recv_timeout_s)

    def where() -> str:
        return f"round {session.round}" if session.round else "registration"

    decoder = FrameDecoder()
    try:
        for msg in session.start():
            sock.sendall(encode(msg))
        while not session.finished:
            try:
                data = sock.recv(_RECV_CHUNK)
            except socket.timeout as exc:
                raise TransportError(f"timed out waiting for the server during {where()}") from exc
            except OSError as exc:
                raise TransportError(f"connection failed during {where()}: {exc}") from exc
            if not data:
                raise TransportError(f"connection closed by server during {where()}")
            for body in decoder.feed(data):
                for reply in session.handle(decode_body(body)):
                    try:
                        sock.sendall(encode(reply))
                    except OSError as exc:
                        raise TransportError(f"send failed during {where()}: {exc}") from exc
        return session.result
    finally:
        sock.close()


# ---------------------------------------------------------------------------
# Deterministic in-process simulation


@dataclass
class SimulationResult:
    states: dict[str, object]
    local_models: dict[str, Model]
    configs: dict[str, WrapperConfig]
    federation: FederationResult
    report: MetricsReport
    test_accuracy_by_round: list[float] = field(default_factory=list)


def pretrain_local_models(
    partition: Partition,
    client_specs: dict[str, ModelSpec],
    local_hp: TrainHp,
) -> dict[str, Model]:
    """Train each client's "existing" model on its own shard, deterministically."""
    ids = sorted(client_specs)
    models = {}
    for cid, ds in zip(ids, partition.client_datasets):
        seed = derive_seed(local_hp.seed, "local", cid)
        hp = TrainHp(
            learning_rate=local_hp.learning_rate,
            batch_size=local_hp.batch_size,
            local_epochs=local_hp.local_epochs,
            l2=local_hp.l2,
            seed=seed,
        )
        models[cid] = sgd_train(init_model(client_specs[cid], seed), ds, hp)
    return models


def build_client_configs(
    partition: Partition,
    local_models: dict[str, Model],
    plan: FederationPlan,
    feature_mode: FeatureMode | None = None,
    threshold: float = 0.5,
    fusion_weight: float = 0.5,
    token: str = "",
) -> dict[str, WrapperConfig]:
    feature_mode = feature_mode or FeatureMode()
    ids = sorted(local_models)
    configs = {}
    for cid, ds in zip(ids, partition.client_datasets):
        configs[cid] = WrapperConfig(
            local_model=handle_from_model(local_models[cid]),
            train_dataset=ds,
            translator=plan.translator_spec,
            client_id=cid,
            clients=[c for c in ids if c != cid],
            hp=plan.hp,
            feature_mode=feature_mode,
            threshold=threshold,
            fusion_weight=fusion_weight,
            token=token,
        )
    return configs


def run_protocol_in_memory(
    plan: FederationPlan, configs: dict[str, WrapperConfig], mode: str, token: str = ""
) -> tuple[dict[str, object], FederationResult]:
    """Execute the full protocol with frames passed in memory.

    Clients are stepped in sorted-id order, so the message schedule (and
    therefore every artifact) is deterministic.
    """
    specs = {cid: cfg.translator.to_dict() for cid, cfg in configs.items()}
    if mode == MODE_STACKING and len({str(sorted(s.items())) for s in specs.values()}) > 1:
        raise FederationError(f"heterogeneous translator specs across clients: {specs}")
    proto = ServerProtocol(plan, token=token)
    sessions = {cid: ClientSession(cfg, mode) for cid, cfg in configs.items()}
    ids = sorted(sessions)
    server_inbox: deque[tuple[str, bytes]] = deque()
    client_inbox: dict[str, deque[bytes]] = {cid: deque() for cid in ids}
    result: FederationResult | None = None

    for cid in ids:
        for msg in sessions[cid].start():
            server_inbox.append((cid, encode(msg)))

    while server_inbox or any(client_inbox.values()):
        while server_inbox:
            cid, frame = server_inbox.popleft()
            for action in proto.handle_frame(cid, frame[4:]):
                if action[0] == ACT_SEND:
                    client_inbox[action[1]].append(encode(action[2]))
                elif action[0] == ACT_CLOSE:
                    proto.drop_connection(action[1])
                elif action[0] == ACT_FINISHED:
                    result = action[2]
        for cid in ids:
            inbox = client_inbox[cid]
            while inbox:
                body = inbox.popleft()[4:]
                for reply in sessions[cid].handle(decode_body(body)):
                    server_inbox.append((cid, encode(reply)))

    if result is None:
        raise FederationError("protocol drained without finishing")
    unfinished = [cid for cid in ids if not sessions[cid].finished]
    if unfinished:
        raise FederationError(f"clients did not finish: {unfinished}")
    return {cid: sessions[cid].result for cid in ids}, result


def evaluate_clients(
    partition: Partition,
    configs: dict[str, WrapperConfig],
    states: dict[str, object],
) -> MetricsReport:
    """Per-client metrics on the shared test set for the local model, the
    wrapped model (configured fusion weight), and the federated model alone."""
    test = partition.test_set
    task = default_task(test.n_classes)
    per_client: dict[str, dict[str, dict[str, float]]] = {}
    for cid in sorted(configs):
        cfg = configs[cid]
        state = states[cid]

        def local_predict(x):
            return decide_labels(cfg.local_model.predict_proba(x), test.n_classes, cfg.threshold)

        def wrapper_predict(x):
            return wrapper_infer_batch(cfg, state, x)[1]

        def translator_predict(x):
            return decide_labels(federated_predict_batch(cfg, state, x), test.n_classes, cfg.threshold)

        per_client[cid] = {
            "local": metrics_from_confusion(confusion(local_predict, test), task),
            "wrapper": metrics_from_confusion(confusion(wrapper_predict, test), task),
            "translator": metrics_from_confusion(confusion(translator_predict, test), task),
        }
    return MetricsReport.from_per_client(per_client)


def simulate(
    partition: Partition,
    client_specs: dict[str, ModelSpec],
    plan: FederationPlan,
    mode: str,
    local_hp: TrainHp | None = None,
    feature_mode: FeatureMode | None = None,
    threshold: float = 0.5,
    fusion_weight: float = 0.5,
    token: str = "",
) -> SimulationResult:
    """End-to-end deterministic experiment in one process.

    Pretrains one "existing" local model per client on its own shard, runs
    the wrapper federation over the in-memory transport, and evaluates local
    and wrapped models on the shared balanced test set.
    """
    if len(client_specs) != len(partition.client_datasets):
        raise FederationError(
            f"{len(client_specs)} client specs for {len(partition.client_datasets)} shards"
        )
    if sorted(client_specs) != list(plan.expected_clients):
        raise FederationError(
            f"client ids {sorted(client_specs)} != plan roster {list(plan.expected_clients)}"
        )
    local_hp = local_hp or plan.hp
    local_models = pretrain_local_models(partition, client_specs, local_hp)
    configs = build_client_configs(
        partition,
        local_models,
        plan,
        feature_mode=feature_mode,
        threshold=threshold,
        fusion_weight=fusion_weight,
        token=token,
    )
    states, federation = run_protocol_in_memory(plan, configs, mode, token=token)
    report = evaluate_clients(partition, configs, states)

    accuracy_by_round: list[float] = []
    if mode == MODE_STACKING and federation.log:
        accuracy_by_round = [
            r.test_accuracy for r in federation.log if r.test_accuracy is not None
        ]
    return SimulationResult(
        states=states,
        local_models=local_models,
        configs=configs,
        federation=federation,
        report=report,
        test_accuracy_by_round=accuracy_by_round,
    )


def stacking_plan(
    raw_in_dim: int,
    n_classes: int,
    client_ids: list[str],
    rounds: int,
    hp: TrainHp,
    translator_kind: str = "mlp3",
    translator_hidden: int | None = 16,
    feature_mode: FeatureMode | None = None,
    timeout_ms: int = 30_000,
) -> FederationPlan:
    """Convenience builder: full translator spec (stacked width) plus plan."""
    spec = stacking_translator_spec(
        kind=translator_kind,
        raw_in_dim=raw_in_dim,
        n_classes=n_classes,
        feature_mode=feature_mode or FeatureMode(),
        hidden_dim=translator_hidden,
    )
    return FederationPlan(
        rounds=rounds,
        expected_clients=tuple(sorted(client_ids)),
        translator_spec=spec,
        hp=hp,
        timeout_ms=timeout_ms,
        mode=MODE_STACKING,
    )
