"""Simulated client/server world.

Clients and the server only talk through typed messages.  None of the message
payload types has a slot that can hold feature rows or labels; the
constructors additionally type-check their fields, so the privacy firewall is
structural rather than a matter of discipline.

Time is simulated: compute and messaging advance a ``SimClock`` according to a
parametric ``CostModel``.  Work that happens in parallel advances the clock by
the maximum of the individual durations.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from . import nn_core
from .data import Chunk, ClientShard, chunk_shard
from .errors import FedSimError, SchedulingError
from .nn_core import AdamState, GradientSet, MlpModel, ModelParams

log = logging.getLogger(__name__)

SERVER = "server"
Principal = Union[int, str]


@dataclass(frozen=True)
class CostModel:
    """Simulated-time costs in arbitrary units.  Defaults are not calibrated to any hardware."""

    t_fwd_per_sample: float = 1.0
    t_bwd_per_sample: float = 2.0
    t_agg_per_param: float = 1e-6
    t_msg_fixed: float = 5.0
    t_msg_per_byte: float = 1e-6

    def train_time(self, n_samples: int) -> float:
        return (self.t_fwd_per_sample + self.t_bwd_per_sample) * n_samples

    def message_time(self, n_bytes: int) -> float:
        return self.t_msg_fixed + self.t_msg_per_byte * n_bytes

    def aggregate_time(self, n_params: int, n_inputs: int = 1) -> float:
        return self.t_agg_per_param * n_params * n_inputs


class SimClock:
    def __init__(self, cost: CostModel | None = None, now: float = 0.0):
        self.cost = cost or CostModel()
        self.now = float(now)

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("simulated time cannot run backwards")
        self.now += dt
        return self.now

    def __repr__(self):
        return f"SimClock(now={self.now!r})"


# --- messages ----------------------------------------------------------------

def _require(value, types, name):
    if not isinstance(value, types):
        raise TypeError(f"{name} must be {types}, got {type(value).__name__}")


@dataclass(frozen=True)
class ModelBroadcast:
    params: ModelParams
    optimizer: AdamState | None = None

    def __post_init__(self):
        _require(self.params, ModelParams, "params")
        _require(self.optimizer, (AdamState, type(None)), "optimizer")


@dataclass(frozen=True)
class TrainChunkCmd:
    client_id: int

    def __post_init__(self):
        _require(self.client_id, (int, np.integer), "client_id")


@dataclass(frozen=True)
class LossGradReport:
    client_id: int
    loss: float
    grads: GradientSet

    def __post_init__(self):
        _require(self.client_id, (int, np.integer), "client_id")
        _require(self.loss, (float, np.floating), "loss")
        _require(self.grads, GradientSet, "grads")


@dataclass(frozen=True)
class LocalModelReport:
    client_id: int
    params: ModelParams
    size: int
    optimizer: AdamState | None = None

    def __post_init__(self):
        _require(self.client_id, (int, np.integer), "client_id")
        _require(self.params, ModelParams, "params")
        _require(self.size, (int, np.integer), "size")
        _require(self.optimizer, (AdamState, type(None)), "optimizer")


@dataclass(frozen=True)
class RelayModel:
    """Model handed from one client to the next, with the losses and gradients gathered so far."""

    from_id: int
    to_id: int
    params: ModelParams
    accumulated_loss: float = 0.0
    accumulated_grads: tuple[LossGradReport, ...] = ()
    optimizer: AdamState | None = None

    def __post_init__(self):
        _require(self.params, ModelParams, "params")
        _require(self.accumulated_loss, (float, np.floating), "accumulated_loss")
        _require(self.accumulated_grads, tuple, "accumulated_grads")
        for r in self.accumulated_grads:
            _require(r, LossGradReport, "accumulated_grads item")
        _require(self.optimizer, (AdamState, type(None)), "optimizer")


Payload = Union[ModelBroadcast, TrainChunkCmd, LossGradReport, LocalModelReport, RelayModel]
PAYLOAD_TYPES = (ModelBroadcast, TrainChunkCmd, LossGradReport, LocalModelReport, RelayModel)
_TAGS = {t: i for i, t in enumerate(PAYLOAD_TYPES)}


def _opt_bytes(opt: AdamState | None) -> bytes:
    return b"\x00" if opt is None else b"\x01" + opt.to_bytes()


def _report_bytes(r: LossGradReport) -> bytes:
    return struct.pack("<qd", int(r.client_id), float(r.loss)) + r.grads.to_bytes()


def encode_payload(payload: Payload) -> bytes:
    """Wire encoding: u8 tag then the fields, little-endian."""
    tag = struct.pack("<B", _TAGS[type(payload)])
    if isinstance(payload, ModelBroadcast):
        return tag + payload.params.to_bytes() + _opt_bytes(payload.optimizer)
    if isinstance(payload, TrainChunkCmd):
        return tag + struct.pack("<q", int(payload.client_id))
    if isinstance(payload, LossGradReport):
        return tag + _report_bytes(payload)
    if isinstance(payload, LocalModelReport):
        return (tag + struct.pack("<qq", int(payload.client_id), int(payload.size))
                + payload.params.to_bytes() + _opt_bytes(payload.optimizer))
    body = struct.pack("<qqdI", int(payload.from_id), int(payload.to_id), float(payload.accumulated_loss),
                       len(payload.accumulated_grads))
    reports = b"".join(_report_bytes(r) for r in payload.accumulated_grads)
    return tag + body + payload.params.to_bytes() + reports + _opt_bytes(payload.optimizer)


def _opt_size(opt: AdamState | None) -> int:
    return 1 if opt is None else 1 + opt.nbytes


def wire_size(payload: Payload) -> int:
    """Length of ``encode_payload(payload)`` without materialising the bytes."""
    if isinstance(payload, ModelBroadcast):
        return 1 + payload.params.nbytes + _opt_size(payload.optimizer)
    if isinstance(payload, TrainChunkCmd):
        return 9
    if isinstance(payload, LossGradReport):
        return 1 + 16 + payload.grads.nbytes
    if isinstance(payload, LocalModelReport):
        return 17 + payload.params.nbytes + _opt_size(payload.optimizer)
    reports = sum(16 + r.grads.nbytes for r in payload.accumulated_grads)
    return 1 + 28 + payload.params.nbytes + reports + _opt_size(payload.optimizer)


@dataclass(frozen=True)
class Message:
    payload: Payload
    sender: Principal
    receiver: Principal

    def __post_init__(self):
        _require(self.payload, PAYLOAD_TYPES, "payload")

    @property
    def kind(self) -> str:
        return type(self.payload).__name__

    @property
    def payload_bytes(self) -> int:
        return wire_size(self.payload)

    def encode(self) -> bytes:
        return encode_payload(self.payload)


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    sender: Principal | None = None
    receiver: Principal | None = None
    nbytes: int = 0
    loss: float | None = None

    def to_json(self) -> str:
        obj = {"t": self.t, "kind": self.kind, "from": self.sender, "to": self.receiver, "bytes": self.nbytes}
        if self.loss is not None:
            obj["loss"] = self.loss
        return json.dumps(obj, sort_keys=False)


class EventLog:
    """Append-only event list with non-decreasing timestamps."""

    def __init__(self):
        self.events: list[Event] = []

    def append(self, event: Event) -> None:
        if self.events and event.t < self.events[-1].t:
            raise FedSimError(f"event at t={event.t} precedes last logged t={self.events[-1].t}")
        self.events.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def _message_event(msg: Message, t: float) -> Event:
    loss = float(msg.payload.loss) if isinstance(msg.payload, LossGradReport) else None
    return Event(t, msg.kind, msg.sender, msg.receiver, msg.payload_bytes, loss)


def deliver(msg: Message, clock: SimClock, event_log: EventLog | None = None,
            tap: Callable[[Message, bytes], None] | None = None) -> SimClock:
    """Reliable, in-order delivery; the clock advances by the message's transfer time."""
    clock.advance(clock.cost.message_time(msg.payload_bytes))
    if event_log is not None:
        event_log.append(_message_event(msg, clock.now))
    if tap is not None:
        tap(msg, msg.encode())
    return clock


def deliver_parallel(msgs: Sequence[Message], clock: SimClock, event_log: EventLog | None = None,
                     tap: Callable[[Message, bytes], None] | None = None) -> SimClock:
    """Concurrent transfers over independent links: the clock advances by the slowest one."""
    if not msgs:
        return clock
    start = clock.now
    times = [clock.cost.message_time(m.payload_bytes) for m in msgs]
    if event_log is not None:
        for i in sorted(range(len(msgs)), key=lambda i: times[i]):
            event_log.append(_message_event(msgs[i], start + times[i]))
    if tap is not None:
        for m in msgs:
            tap(m, m.encode())
    return parallel_elapse(times, clock)


def parallel_elapse(durations: Iterable[float], clock: SimClock) -> SimClock:
    durations = list(durations)
    if not durations:
        return clock
    if min(durations) < 0:
        raise ValueError("durations must be non-negative")
    clock.advance(max(durations))
    return clock


# --- nodes -------------------------------------------------------------------

@dataclass
class ClientNode:
    id: int
    shard: ClientShard
    scratch_model: MlpModel
    chunks: list[Chunk] = field(default_factory=list)  # full chunks only
    remainder: Chunk | None = None
    cursor: int = 0

    @classmethod
    def create(cls, shard: ClientShard, template: MlpModel, chunk_size: int | None = None) -> "ClientNode":
        node = cls(shard.client_id, shard, template)
        if chunk_size:
            node.rechunk(chunk_size)
        return node

    @property
    def size(self) -> int:
        return self.shard.size

    def rechunk(self, chunk_size: int) -> None:
        chunks = chunk_shard(self.shard, chunk_size)
        self.remainder = chunks.pop() if chunks and chunks[-1].remainder else None
        self.chunks = chunks
        self.cursor = 0

    def load(self, params: ModelParams) -> MlpModel:
        self.scratch_model = self.scratch_model.with_params(params)
        return self.scratch_model

    def train_local(self, params: ModelParams, epochs: int, batch_size: int, optimizer: str,
                    lr: float) -> tuple[MlpModel, float]:
        """Plain local training over the whole shard, in shard order, with a fresh optimizer."""
        model = self.load(params)
        if self.size == 0:
            return model, 0.0
        bs = max(1, min(self.size, batch_size))
        state = AdamState.for_model(model, learning_rate=lr) if optimizer == "adam" else None
        loss = 0.0
        for _ in range(epochs):
            for start in range(0, self.size, bs):
                x = self.shard.features[start:start + bs]
                y = self.shard.labels[start:start + bs]
                loss, grads = nn_core.loss_and_gradients(model, x, y)
                if state is not None:
                    model, state = nn_core.adam_step(model, grads, state)
                else:
                    model = nn_core.sgd_step(model, grads, lr)
        self.scratch_model = model
        return model, loss


@dataclass
class ServerNode:
    global_model: MlpModel
    optimizer: AdamState | None = None
    round: int = 0


def client_train_chunk(client: ClientNode, params: ModelParams,
                       cost: CostModel | None = None) -> tuple[LossGradReport, float]:
    """Forward, loss and backward on the client's next unused chunk."""
    if client.cursor >= len(client.chunks):
        raise SchedulingError(f"client {client.id} has no unused chunk "
                              f"(cursor {client.cursor} of {len(client.chunks)})")
    chunk = client.chunks[client.cursor]
    model = client.load(params)
    loss, grads = nn_core.loss_and_gradients(model, chunk.features, chunk.labels)
    client.cursor += 1
    duration = (cost or CostModel()).train_time(chunk.size)
    return LossGradReport(client.id, loss, grads), duration


def reset_cursors(clients: Iterable[ClientNode], reshuffle: bool = False, seed: int = 0,
                  iteration: int = 0) -> None:
    """Rewind every client to its first chunk, optionally permuting chunk order.

    The permutation for a client depends only on ``(seed, iteration, client id)``.
    """
    for c in clients:
        c.cursor = 0
        if reshuffle and len(c.chunks) > 1:
            rng = np.random.default_rng([seed, iteration, c.id])
            c.chunks = [c.chunks[i] for i in rng.permutation(len(c.chunks))]


@dataclass
class World:
    server: ServerNode
    clients: list[ClientNode]
    clock: SimClock = field(default_factory=SimClock)
    log: EventLog = field(default_factory=EventLog)
    tap: Callable[[Message, bytes], None] | None = None
    reshuffle_chunks: bool = False
    seed: int = 0
    consumed_samples: int = 0  # samples trained on during the current iteration

    @property
    def cost(self) -> CostModel:
        return self.clock.cost

    def client(self, cid: int) -> ClientNode:
        c = self.clients[cid]
        if c.id != cid:
            raise FedSimError(f"client list is not indexed by id (slot {cid} holds {c.id})")
        return c

    def send(self, sender: Principal, receiver: Principal, payload: Payload) -> Message:
        msg = Message(payload, sender, receiver)
        deliver(msg, self.clock, self.log, self.tap)
        return msg

    def send_parallel(self, triples: Sequence[tuple[Principal, Principal, Payload]]) -> list[Message]:
        msgs = [Message(p, s, r) for s, r, p in triples]
        deliver_parallel(msgs, self.clock, self.log, self.tap)
        return msgs

    def compute(self, kind: str, who: Principal | Sequence[Principal], durations: Sequence[float],
                parallel: bool = True) -> None:
        if parallel:
            parallel_elapse(durations, self.clock)
        else:
            self.clock.advance(sum(durations))
        actor = who if not isinstance(who, (list, tuple)) else ",".join(map(str, who))
        self.log.append(Event(self.clock.now, kind, actor))


def build_world(shards: Sequence[ClientShard], model: MlpModel, cost: CostModel | None = None,
                chunk_size: int | None = None, server_optimizer: AdamState | None = None,
                reshuffle_chunks: bool = False, seed: int = 0) -> World:
    clients = [ClientNode.create(s, model, chunk_size) for s in shards]
    return World(ServerNode(model, server_optimizer), clients, SimClock(cost),
                 reshuffle_chunks=reshuffle_chunks, seed=seed)
