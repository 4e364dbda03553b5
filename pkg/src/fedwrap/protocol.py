"""Framed wire protocol and the coordination state machines.

Frame: 4-byte big-endian unsigned body length, then the body: a UTF-8 JSON
object {v:1, kind, round, sender, token, payload}. Parameter blocks travel
as nested JSON number arrays (floats round-trip exactly under shortest-form
formatting); serialized models travel base64-encoded.

ServerProtocol and ClientSession are transport-free: they consume decoded
frames and emit (send/close/finish) actions. The socket runtime and the
in-process simulator both drive these same objects, which is what makes a
live run numerically identical to a simulated one.

ServerProtocol.handle_frame never raises: any malformed frame, bad token, or
illegal transition turns into an Error reply and/or a connection close.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FederationError, ProtocolError
from .federation import ClientUpdate, FederationPlan, MODE_BAGGING, MODE_STACKING, RoundLogRow, RoundLoop
from .models import Model, deserialize_model, init_model, serialize_model
from .wrapper import (
    BaggingState,
    StackingState,
    WrapperConfig,
    bagging_fit,
    init_stacking_state,
    load_final_params,
    stacking_train_round,
)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024
_LEN = struct.Struct(">I")

KIND_REGISTER = "register"
KIND_REGISTER_ACK = "register_ack"
KIND_ROUND_START = "round_start"
KIND_UPDATE = "update"
KIND_MODEL_SHARE = "model_share"
KIND_MODEL_SHARE_ACK = "model_share_ack"
KIND_DONE = "done"
KIND_ERROR = "error"

MESSAGE_KINDS = frozenset(
    {
        KIND_REGISTER,
        KIND_REGISTER_ACK,
        KIND_ROUND_START,
        KIND_UPDATE,
        KIND_MODEL_SHARE,
        KIND_MODEL_SHARE_ACK,
        KIND_DONE,
        KIND_ERROR,
    }
)


@dataclass
class Message:
    kind: str
    sender: str
    round: int = 0
    payload: dict = field(default_factory=dict)
    token: str = ""


def encode(msg: Message) -> bytes:
    """Frame a message; raises ProtocolError on unknown kinds or oversize."""
    if msg.kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    if msg.round < 0:
        raise ProtocolError(f"round must be >= 0, got {msg.round}")
    try:
        body = json.dumps(
            {
                "v": PROTOCOL_VERSION,
                "kind": msg.kind,
                "round": msg.round,
                "sender": msg.sender,
                "token": msg.token,
                "payload": msg.payload,
            },
            allow_nan=False,
            separators=(",", ":"),
        ).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"payload not encodable: {exc}") from exc
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame body {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    """Decode one frame body (without the length prefix)."""
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame body is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body must be a JSON object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: {obj.get('v')!r}")
    kind = obj.get("kind")
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    round_ = obj.get("round")
    if not isinstance(round_, int) or round_ < 0:
        raise ProtocolError(f"bad round field {round_!r}")
    sender = obj.get("sender")
    token = obj.get("token")
    payload = obj.get("payload")
    if not isinstance(sender, str) or not isinstance(token, str) or not isinstance(payload, dict):
        raise ProtocolError("bad sender/token/payload field types")
    return Message(kind=kind, sender=sender, round=round_, payload=payload, token=token)


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame (prefix plus body)."""
    if len(frame) < _LEN.size:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = _LEN.unpack(frame[: _LEN.size])
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared frame length {length} exceeds {MAX_FRAME_BYTES}")
    if len(frame) != _LEN.size + length:
        raise ProtocolError(
            f"frame has {len(frame) - _LEN.size} body bytes, declared {length}"
        )
    return decode_body(frame[_LEN.size :])


class FrameDecoder:
    """Incremental stream decoder: feed bytes, take complete bodies.

    Partial trailing bytes are held until the rest arrives; they are never
    misparsed as a new frame.
    """

    def __init__(self, max_frame_bytes: int = MAX_FRAME_BYTES):
        self._buf = bytearray()
        self._max = max_frame_bytes

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        bodies = []
        while True:
            if len(self._buf) < _LEN.size:
                return bodies
            (length,) = _LEN.unpack(self._buf[: _LEN.size])
            if length > self._max:
                raise ProtocolError(f"declared frame length {length} exceeds {self._max}")
            if len(self._buf) < _LEN.size + length:
                return bodies
            bodies.append(bytes(self._buf[_LEN.size : _LEN.size + length]))
            del self._buf[: _LEN.size + length]

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def params_to_payload(params: list[np.ndarray]) -> list:
    return [np.asarray(p, dtype=np.float64).tolist() for p in params]


def payload_to_params(raw) -> list[np.ndarray]:
    if not isinstance(raw, list):
        raise ProtocolError("params payload must be a list of blocks")
    try:
        return [np.asarray(block, dtype=np.float64) for block in raw]
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"params payload not numeric: {exc}") from exc


def model_to_payload(model: Model) -> str:
    return base64.b64encode(serialize_model(model)).decode("ascii")


def payload_to_model(raw) -> Model:
    if not isinstance(raw, str):
        raise ProtocolError("model payload must be a base64 string")
    try:
        blob = base64.b64decode(raw.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ProtocolError(f"model payload is not valid base64: {exc}") from exc
    return deserialize_model(blob)


# ---------------------------------------------------------------------------
# Server state machine

SERVER_AWAITING_ROSTER = "awaiting_roster"
SERVER_ROUND_OPEN = "round_open"
SERVER_AGGREGATING = "aggregating"
SERVER_DONE = "done"

ACT_SEND = "send"
ACT_CLOSE = "close"
ACT_FINISHED = "finished"


@dataclass
class FederationResult:
    mode: str
    final_params: list[np.ndarray] | None
    log: list[RoundLogRow]


class ServerProtocol:
    """Coordinator state machine, one instance per federation.

    All mutation goes through handle_frame / drop_connection / timeout_check;
    the owning transport must serialize those calls (single-writer contract).
    Actions returned are ("send", conn_key, Message), ("close", conn_key), or
    ("finished", FederationResult).
    """

    def __init__(self, plan: FederationPlan, token: str = ""):
        self.plan = plan
        self.token = token
        self.phase = SERVER_AWAITING_ROSTER
        self.conn_of_client: dict[str, object] = {}
        self.client_of_conn: dict[object, str] = {}
        self.loop: RoundLoop | None = None
        self.shares: dict[str, str] = {}  # client_id -> base64 model (bagging)
        self.result: FederationResult | None = None
        self._initial_params = init_model(plan.translator_spec, seed=plan.hp.seed).params

    # -- helpers

    def _error(self, conn_key, text: str, close: bool = True) -> list[tuple]:
        actions = [
            (
                ACT_SEND,
                conn_key,
                Message(kind=KIND_ERROR, sender="server", token=self.token, payload={"text": text}),
            )
        ]
        if close:
            actions.append((ACT_CLOSE, conn_key))
        return actions

    def _broadcast(self, make_msg) -> list[tuple]:
        actions = []
        for cid in self.plan.expected_clients:
            conn = self.conn_of_client.get(cid)
            if conn is not None:
                actions.append((ACT_SEND, conn, make_msg(cid)))
        return actions

    def registration_missing(self) -> list[str]:
        return [c for c in self.plan.expected_clients if c not in self.conn_of_client]

    @property
    def roster_complete(self) -> bool:
        return not self.registration_missing()

    @property
    def current_round(self) -> int:
        return 0 if self.loop is None else self.loop.current_round

    # -- events

    def handle_frame(self, conn_key, body: bytes) -> list[tuple]:
        """Consume one frame body from a connection; never raises."""
        try:
            msg = decode_body(body)
        except Exception as exc:
            return self._error(conn_key, f"bad frame: {exc}")
        return self.handle_message(conn_key, msg)

    def handle_message(self, conn_key, msg: Message) -> list[tuple]:
        try:
            if msg.token != self.token:
                return self._error(conn_key, "bad token")
            if msg.kind == KIND_REGISTER:
                return self._on_register(conn_key, msg)
            registered = self.client_of_conn.get(conn_key)
            if registered is None:
                return self._error(conn_key, "connection is not registered")
            if msg.sender != registered:
                return self._error(conn_key, f"sender {msg.sender!r} does not own this connection")
            if msg.kind == KIND_UPDATE:
                return self._on_update(conn_key, msg)
            if msg.kind == KIND_MODEL_SHARE:
                return self._on_model_share(conn_key, msg)
            if msg.kind == KIND_ERROR:
                return [(ACT_CLOSE, conn_key)]
            return self._error(conn_key, f"unexpected message kind {msg.kind!r}")
        except Exception as exc:  # protocol safety boundary: malformed input never crashes the server
            return self._error(conn_key, f"{type(exc).__name__}: {exc}")

    def drop_connection(self, conn_key) -> None:
        cid = self.client_of_conn.pop(conn_key, None)
        if cid is not None:
            self.conn_of_client.pop(cid, None)

    def timeout_check(self) -> None:
        """Raise RoundTimeoutError if the open round has expired."""
        if self.loop is not None and not self.loop.done:
            self.loop.timeout_check()

    # -- message handlers

    def _on_register(self, conn_key, msg: Message) -> list[tuple]:
        if self.phase != SERVER_AWAITING_ROSTER:
            return self._error(conn_key, "registration is closed")
        cid = msg.sender
        if cid not in self.plan.expected_clients:
            return self._error(conn_key, f"unknown client_id {cid!r}")
        if cid in self.conn_of_client:
            return self._error(conn_key, f"duplicate id {cid!r}")
        mode = msg.payload.get("mode")
        if mode != self.plan.mode:
            return self._error(conn_key, f"client mode {mode!r} != federation mode {self.plan.mode!r}")
        if self.plan.mode == MODE_STACKING:
            # homogeneity gate: reject a mismatched translator before round 1
            spec_dict = msg.payload.get("translator")
            if spec_dict != self.plan.translator_spec.to_dict():
                return self._error(
                    conn_key,
                    f"heterogeneous translator: client {cid!r} declared {spec_dict}, "
                    f"federation uses {self.plan.translator_spec.to_dict()}",
                )
        self.conn_of_client[cid] = conn_key
        self.client_of_conn[conn_key] = cid
        if not self.roster_complete:
            return []
        actions = self._broadcast(
            lambda c: Message(
                kind=KIND_REGISTER_ACK,
                sender="server",
                token=self.token,
                payload={"clients": list(self.plan.expected_clients), "rounds": self.plan.rounds},
            )
        )
        if self.plan.mode == MODE_STACKING:
            self.loop = RoundLoop(self.plan, self._initial_params)
            self.phase = SERVER_ROUND_OPEN
            actions += self._round_start_actions()
        else:
            self.phase = SERVER_ROUND_OPEN  # one model-exchange "round"
        return actions

    def _round_start_actions(self) -> list[tuple]:
        assert self.loop is not None
        return self._broadcast(
            lambda c: Message(
                kind=KIND_ROUND_START,
                sender="server",
                round=self.loop.current_round,
                token=self.token,
                payload={"params": params_to_payload(self.loop.global_params)},
            )
        )

    def _on_update(self, conn_key, msg: Message) -> list[tuple]:
        if self.plan.mode != MODE_STACKING or self.loop is None or self.phase != SERVER_ROUND_OPEN:
            return self._error(conn_key, "no round is open for updates")
        payload = msg.payload
        try:
            update = ClientUpdate(
                client_id=msg.sender,
                round=msg.round,
                params=payload_to_params(payload.get("params")),
                n_samples=int(payload.get("n_samples", 0)),
                loss=float(payload.get("loss", float("nan"))),
            )
        except Exception as exc:
            return self._error(conn_key, f"bad update: {exc}")
        try:
            self.loop.offer(update)
        except FederationError as exc:
            return self._error(conn_key, str(exc))
        if not self.loop.ready():
            return []
        self.phase = SERVER_AGGREGATING
        params, done = self.loop.close_round()
        if done:
            self.phase = SERVER_DONE
            self.result = FederationResult(
                mode=self.plan.mode, final_params=params, log=self.loop.log
            )
            actions = self._broadcast(
                lambda c: Message(
                    kind=KIND_DONE,
                    sender="server",
                    round=self.loop.log[-1].round,
                    token=self.token,
                    payload={"params": params_to_payload(params)},
                )
            )
            return actions + [(ACT_FINISHED, None, self.result)]
        self.phase = SERVER_ROUND_OPEN
        return self._round_start_actions()

    def _on_model_share(self, conn_key, msg: Message) -> list[tuple]:
        if self.plan.mode != MODE_BAGGING or self.phase != SERVER_ROUND_OPEN:
            return self._error(conn_key, "model sharing is not open")
        cid = msg.sender
        if cid in self.shares:
            return self._error(conn_key, f"duplicate model share from {cid!r}")
        raw = msg.payload.get("model")
        if not isinstance(raw, str):
            return self._error(conn_key, "model share payload missing base64 model")
        payload_to_model(raw)  # validate before relaying
        self.shares[cid] = raw
        actions = [
            (
                ACT_SEND,
                conn_key,
                Message(
                    kind=KIND_MODEL_SHARE_ACK,
                    sender="server",
                    token=self.token,
                    payload={"received": len(self.shares)},
                ),
            )
        ]
        if len(self.shares) < len(self.plan.expected_clients):
            return actions
        # relay every share to every *other* participant, then finish
        for cid_dst in self.plan.expected_clients:
            conn = self.conn_of_client.get(cid_dst)
            if conn is None:
                continue
            for cid_src in self.plan.expected_clients:
                if cid_src == cid_dst:
                    continue
                actions.append(
                    (
                        ACT_SEND,
                        conn,
                        Message(
                            kind=KIND_MODEL_SHARE,
                            sender=cid_src,
                            token=self.token,
                            payload={"model": self.shares[cid_src]},
                        ),
                    )
                )
        self.phase = SERVER_DONE
        self.result = FederationResult(mode=self.plan.mode, final_params=None, log=[])
        actions += self._broadcast(
            lambda c: Message(kind=KIND_DONE, sender="server", token=self.token)
        )
        return actions + [(ACT_FINISHED, None, self.result)]


# ---------------------------------------------------------------------------
# Client state machine

CLIENT_UNREGISTERED = "unregistered"
CLIENT_REGISTERED = "registered"
CLIENT_IN_ROUND = "in_round"
CLIENT_FINISHED = "finished"


class ClientSession:
    """Client-side protocol state machine for one federation.

    Legal inbound transitions: RegisterAck while unregistered; RoundStart(1)
    once registered; RoundStart(n+1) only after Update(n) was sent; Done at
    any registered point. Anything else raises ProtocolError.
    """

    def __init__(self, cfg: WrapperConfig, mode: str):
        if mode not in (MODE_STACKING, MODE_BAGGING):
            raise ProtocolError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.phase = CLIENT_UNREGISTERED
        self.round = 0
        self.stacking: StackingState | None = None
        self.bagging: BaggingState | None = None
        self.peer_models: dict[str, Model] = {}
        if mode == MODE_STACKING:
            self.stacking = init_stacking_state(cfg)

    def start(self) -> list[Message]:
        payload = {"mode": self.mode}
        if self.mode == MODE_STACKING:
            payload["translator"] = self.cfg.translator.to_dict()
        return [
            Message(
                kind=KIND_REGISTER,
                sender=self.cfg.client_id,
                token=self.cfg.token,
                payload=payload,
            )
        ]

    @property
    def finished(self) -> bool:
        return self.phase == CLIENT_FINISHED

    @property
    def result(self):
        if not self.finished:
            raise ProtocolError("federation has not finished")
        return self.stacking if self.mode == MODE_STACKING else self.bagging

    def handle(self, msg: Message) -> list[Message]:
        if msg.token != self.cfg.token:
            raise ProtocolError("message with bad token")
        if msg.kind == KIND_ERROR:
            raise FederationError(f"server error: {msg.payload.get('text', '')}")
        if msg.kind == KIND_REGISTER_ACK:
            return self._on_register_ack(msg)
        if msg.kind == KIND_ROUND_START:
            return self._on_round_start(msg)
        if msg.kind == KIND_MODEL_SHARE:
            return self._on_model_share(msg)
        if msg.kind == KIND_MODEL_SHARE_ACK:
            return []
        if msg.kind == KIND_DONE:
            return self._on_done(msg)
        raise ProtocolError(f"unexpected message kind {msg.kind!r}")

    def _on_register_ack(self, msg: Message) -> list[Message]:
        if self.phase != CLIENT_UNREGISTERED:
            raise ProtocolError("duplicate register_ack")
        roster = msg.payload.get("clients")
        if sorted(roster or []) != self.cfg.roster:
            raise ProtocolError(f"server roster {roster} != configured roster {self.cfg.roster}")
        self.phase = CLIENT_REGISTERED
        if self.mode == MODE_BAGGING:
            own = self.cfg.local_model.core
            if own is None:
                raise ProtocolError(
                    "bagging over the wire needs a serializable parametric local model"
                )
            return [
                Message(
                    kind=KIND_MODEL_SHARE,
                    sender=self.cfg.client_id,
                    token=self.cfg.token,
                    payload={"model": model_to_payload(own)},
                )
            ]
        return []

    def _on_round_start(self, msg: Message) -> list[Message]:
        if self.mode != MODE_STACKING:
            raise ProtocolError("round_start in bagging mode")
        if self.phase == CLIENT_REGISTERED:
            if msg.round != 1:
                raise ProtocolError(f"first round_start must be round 1, got {msg.round}")
        elif self.phase == CLIENT_IN_ROUND:
            if msg.round != self.round + 1:
                raise ProtocolError(
                    f"round_start {msg.round} does not follow completed round {self.round}"
                )
        else:
            raise ProtocolError(f"round_start while {self.phase}")
        params = payload_to_params(msg.payload.get("params"))
        assert self.stacking is not None
        new_params, n_samples, loss = stacking_train_round(self.stacking, self.cfg, params)
        self.phase = CLIENT_IN_ROUND
        self.round = msg.round
        return [
            Message(
                kind=KIND_UPDATE,
                sender=self.cfg.client_id,
                round=msg.round,
                token=self.cfg.token,
                payload={
                    "params": params_to_payload(new_params),
                    "n_samples": n_samples,
                    "loss": loss,
                },
            )
        ]

    def _on_model_share(self, msg: Message) -> list[Message]:
        if self.mode != MODE_BAGGING or self.phase not in (CLIENT_REGISTERED, CLIENT_IN_ROUND):
            raise ProtocolError("unexpected model_share")
        if msg.sender == self.cfg.client_id or msg.sender not in self.cfg.clients:
            raise ProtocolError(f"model_share from unexpected sender {msg.sender!r}")
        if msg.sender in self.peer_models:
            raise ProtocolError(f"duplicate model_share from {msg.sender!r}")
        self.peer_models[msg.sender] = payload_to_model(msg.payload.get("model"))
        return []

    def _on_done(self, msg: Message) -> list[Message]:
        if self.phase not in (CLIENT_REGISTERED, CLIENT_IN_ROUND):
            raise ProtocolError(f"done while {self.phase}")
        if self.mode == MODE_STACKING:
            assert self.stacking is not None
            load_final_params(self.stacking, payload_to_params(msg.payload.get("params")))
        else:
            missing = [c for c in self.cfg.clients if c not in self.peer_models]
            if missing:
                raise ProtocolError(f"done before model shares from {missing}")
            own = self.cfg.local_model.core
            assert own is not None  # checked at share time
            members = dict(self.peer_models)
            members[self.cfg.client_id] = own
            self.bagging = bagging_fit(self.cfg, members)
        self.phase = CLIENT_FINISHED
        return []
