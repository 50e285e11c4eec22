"""Training protocols: FedAVG, weighted FedAVG, cycle learning, and chunk-scheduled
training with either a central server update or a host-client update.

Every ``*_iteration`` function runs one global iteration on a ``World`` and
returns ``(global_model, simulated_duration)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import nn_core
from .errors import AggregationError, ConfigurationError, SchedulingError
from .nn_core import AdamState, GradientSet, MlpModel
from .runtime import (SERVER, LocalModelReport, LossGradReport, ModelBroadcast, RelayModel, World,
                      client_train_chunk, reset_cursors)

log = logging.getLogger(__name__)

KINDS = ("fedavg", "wfedavg", "cycle", "proposed", "proposed_semi")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    batch_size: int = 60
    parallel_window_size: int = 3
    cluster_window_size: int = 3
    local_epochs: int = 1
    local_batch_size: int = 32
    iterations: int = 5
    optimizer: str = "adam"
    learning_rate: float = 0.001
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}", "kind")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}",
                                     "optimizer")
        for key in ("batch_size", "parallel_window_size", "cluster_window_size", "local_epochs",
                    "local_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigurationError("must be >= 1", key)
        if self.iterations < 0:
            raise ConfigurationError("must be >= 0", "iterations")
        if self.learning_rate <= 0:
            raise ConfigurationError("must be > 0", "learning_rate")
        if self.kind in ("proposed", "proposed_semi"):
            key = "parallel_window_size" if self.kind == "proposed" else "cluster_window_size"
            if self.window > self.batch_size:
                raise ConfigurationError(f"window {self.window} exceeds batch_size {self.batch_size}", key)
            if self.batch_size % self.window:
                raise ConfigurationError(
                    f"batch_size {self.batch_size} is not divisible by window {self.window}", key)

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def window(self) -> int:
        return self.cluster_window_size if self.kind == "proposed_semi" else self.parallel_window_size

    @property
    def chunk_size(self) -> int:
        return self.batch_size // self.window


# --- instruction generation --------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    client_id: int
    chunk_idx: int


@dataclass
class Schedule:
    chunk_size: int
    batch_size: int
    steps: list[list[Assignment]]
    # per-client instruction vector: [chunk size or d, remainder flag, one 0/1 flag per step]
    instructions: dict[int, list[int]] = field(default_factory=dict)

    @property
    def total_scheduled(self) -> int:
        return self.chunk_size * sum(len(s) for s in self.steps)

    def step_clients(self) -> list[tuple[int, ...]]:
        return [tuple(a.client_id for a in s) for s in self.steps]

    def to_dict(self, hosts: dict[int, int] | None = None) -> dict:
        out = {"chunk_size": self.chunk_size,
               "steps": [[{"client": a.client_id, "chunk_idx": a.chunk_idx} for a in s] for s in self.steps]}
        if hosts is not None:
            out["hosts"] = [hosts[t] for t in range(len(self.steps))]
        return out

    def to_json(self, hosts: dict[int, int] | None = None) -> str:
        return json.dumps(self.to_dict(hosts))


HostAssignment = dict  # step index -> host client id


def generate_instructions(sizes: Sequence[int], batch_size: int, window: int) -> Schedule:
    """Greedy chunk scheduler.

    Clients are visited largest first (ties: lower id first).  Each walks the
    steps in order and drops one chunk into every step that still has room,
    until its full chunks run out.  A client that still has chunks after the
    last step opens new trailing steps.  Remainder rows (``d mod chunk``) are
    flagged in the instruction vector but never scheduled.
    """
    if batch_size < 1 or window < 1:
        raise ConfigurationError("batch_size and window must be >= 1")
    if batch_size % window:
        raise ConfigurationError(f"batch_size {batch_size} is not divisible by window {window}")
    c = batch_size // window
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    first_train = sum(d - d % c for d in sizes)
    n_steps = math.ceil(first_train / batch_size)
    if first_train < batch_size:
        log.warning("only %d full-chunk rows available for batch_size %d", first_train, batch_size)
    contributors = sum(1 for d in sizes if d >= c)
    if window > contributors:
        log.warning("window %d exceeds the %d clients holding a full chunk; steps will be underfilled",
                    window, contributors)

    collection = [0] * n_steps
    steps: list[list[Assignment]] = [[] for _ in range(n_steps)]
    instructions: dict[int, list[int]] = {}
    for cid in order:
        d = sizes[cid]
        d_ins = [c if d >= c else d, 0 if d % c == 0 else 1]
        remaining = d
        k = 0
        for t in range(len(collection)):
            if collection[t] < batch_size and remaining >= c:
                d_ins.append(1)
                steps[t].append(Assignment(cid, k))
                collection[t] += c
                remaining -= c
                k += 1
            else:
                d_ins.append(0)
        while remaining >= c:
            collection.append(c)
            steps.append([Assignment(cid, k)])
            d_ins.append(1)
            remaining -= c
            k += 1
        instructions[cid] = d_ins
    return Schedule(c, batch_size, steps, instructions)


def generate_instructions_with_hosts(sizes: Sequence[int], batch_size: int,
                                     cluster_window: int) -> tuple[Schedule, HostAssignment]:
    """Same schedule; the host of a step is the last client assigned to it."""
    schedule = generate_instructions(sizes, batch_size, cluster_window)
    hosts = {t: step[-1].client_id for t, step in enumerate(schedule.steps)}
    return schedule, hosts


# --- helpers -----------------------------------------------------------------

def _apply_update(model: MlpModel, grads: GradientSet, state: AdamState | None,
                  cfg: StrategyConfig) -> tuple[MlpModel, AdamState | None]:
    if cfg.optimizer == "sgd":
        return nn_core.sgd_step(model, grads, cfg.learning_rate), state
    if state is None:
        state = AdamState.for_model(model, learning_rate=cfg.learning_rate)
    return nn_core.adam_step(model, grads, state)


def _active_clients(world: World):
    active = []
    for c in world.clients:
        if c.size == 0:
            log.warning("client %d has an empty shard; skipped", c.id)
        else:
            active.append(c)
    return active


def _begin_iteration(world: World) -> float:
    world.consumed_samples = 0
    return world.clock.now


def _end_iteration(world: World, start: float) -> tuple[MlpModel, float]:
    world.server.round += 1
    return world.server.global_model, world.clock.now - start


def _model_averaging(world: World, cfg: StrategyConfig, weighted: bool) -> tuple[MlpModel, float]:
    start = _begin_iteration(world)
    server = world.server
    params = server.global_model.params()
    active = _active_clients(world)
    if not active:
        raise AggregationError("no client holds any data")
    world.send_parallel([(SERVER, c.id, ModelBroadcast(params)) for c in active])
    local, durations = [], []
    for c in active:
        m, _ = c.train_local(params, cfg.local_epochs, cfg.local_batch_size, cfg.optimizer, cfg.learning_rate)
        local.append(m.params())
        durations.append(world.cost.train_time(c.size * cfg.local_epochs))
        world.consumed_samples += c.size * cfg.local_epochs
    world.compute("local_train", [c.id for c in active], durations)
    world.send_parallel([(c.id, SERVER, LocalModelReport(c.id, p, c.size)) for c, p in zip(active, local)])
    weights = [c.size for c in active] if weighted else [1.0] * len(active)
    averaged = nn_core.average_params(local, weights)
    world.compute("aggregate", SERVER, [world.cost.aggregate_time(averaged.size, len(local))])
    server.global_model = server.global_model.with_params(averaged)
    return _end_iteration(world, start)


# --- protocols ---------------------------------------------------------------

def fedavg_iteration(world: World, cfg: StrategyConfig) -> tuple[MlpModel, float]:
    return _model_averaging(world, cfg, weighted=False)


def wfedavg_iteration(world: World, cfg: StrategyConfig) -> tuple[MlpModel, float]:
    return _model_averaging(world, cfg, weighted=True)


def cycle_iteration(world: World, cfg: StrategyConfig) -> tuple[MlpModel, float]:
    start = _begin_iteration(world)
    active = _active_clients(world)
    if not active:
        return _end_iteration(world, start)
    params = world.server.global_model.params()
    world.send(SERVER, active[0].id, ModelBroadcast(params))
    for j, c in enumerate(active):
        m, _ = c.train_local(params, cfg.local_epochs, cfg.local_batch_size, cfg.optimizer, cfg.learning_rate)
        world.compute("local_train", c.id, [world.cost.train_time(c.size * cfg.local_epochs)])
        world.consumed_samples += c.size * cfg.local_epochs
        params = m.params()
        if j + 1 < len(active):
            nxt = active[j + 1].id
            world.send(c.id, nxt, RelayModel(c.id, nxt, params))
        else:
            world.send(c.id, SERVER, LocalModelReport(c.id, params, c.size))
    world.server.global_model = world.server.global_model.with_params(params)
    return _end_iteration(world, start)


def _rewind(world: World) -> None:
    reset_cursors(world.clients, world.reshuffle_chunks, world.seed, world.server.round)


def _train_assigned(world: World, assignment: Assignment, params) -> tuple[LossGradReport, float]:
    client = world.client(assignment.client_id)
    if client.cursor != assignment.chunk_idx:
        raise SchedulingError(f"client {client.id} is at chunk {client.cursor} "
                              f"but the schedule asks for chunk {assignment.chunk_idx}")
    return client_train_chunk(client, params, world.cost)


def proposed_iteration(world: World, cfg: StrategyConfig, schedule: Schedule) -> tuple[MlpModel, float]:
    """Per step: broadcast, every scheduled client forward/backwards one chunk in
    parallel, the server averages the gradients and takes one optimizer step."""
    start = _begin_iteration(world)
    _rewind(world)
    server = world.server
    for step in schedule.steps:
        members = [a.client_id for a in step]
        params = server.global_model.params()
        world.send_parallel([(SERVER, cid, ModelBroadcast(params)) for cid in members])
        reports, durations = [], []
        for a in step:
            rep, dt = _train_assigned(world, a, params)
            reports.append(rep)
            durations.append(dt)
        world.compute("train_chunk", members, durations)
        world.send_parallel([(r.client_id, SERVER, r) for r in reports])
        reports.sort(key=lambda r: r.client_id)
        grads = nn_core.average_gradients([r.grads for r in reports])
        server.global_model, server.optimizer = _apply_update(server.global_model, grads, server.optimizer, cfg)
        world.compute("update", SERVER, [world.cost.aggregate_time(server.global_model.num_params, len(reports))])
        world.consumed_samples += grads.sample_count
    return _end_iteration(world, start)


def semicentral_iteration(world: World, cfg: StrategyConfig, schedule: Schedule,
                          hosts: HostAssignment) -> tuple[MlpModel, float]:
    """Per step: the model is relayed through the step's clients in order; the host
    (last in line) averages the gathered gradients, updates and returns the model."""
    start = _begin_iteration(world)
    _rewind(world)
    server = world.server
    for t, step in enumerate(schedule.steps):
        host = hosts.get(t)
        members = [a.client_id for a in step]
        if host not in members:
            raise ConfigurationError(f"host {host} of step {t} is not scheduled in that step")
        order = [a for a in step if a.client_id != host] + [a for a in step if a.client_id == host]
        params = server.global_model.params()
        opt = server.optimizer
        if cfg.optimizer == "adam" and opt is None:
            opt = AdamState.for_model(server.global_model, learning_rate=cfg.learning_rate)
        world.send(SERVER, order[0].client_id, ModelBroadcast(params, opt))
        gathered: tuple[LossGradReport, ...] = ()
        total_loss = 0.0
        for j, a in enumerate(order):
            rep, dt = _train_assigned(world, a, params)
            world.compute("train_chunk", a.client_id, [dt])
            gathered += (rep,)
            total_loss += rep.loss
            if j + 1 < len(order):
                nxt = order[j + 1].client_id
                world.send(a.client_id, nxt, RelayModel(a.client_id, nxt, params, total_loss, gathered, opt))
        ordered = sorted(gathered, key=lambda r: r.client_id)
        grads = nn_core.average_gradients([r.grads for r in ordered])
        host_model = world.client(host).load(params)
        host_model, opt = _apply_update(host_model, grads, opt, cfg)
        world.compute("update", host, [world.cost.aggregate_time(host_model.num_params, len(ordered))])
        world.send(host, SERVER, LocalModelReport(host, host_model.params(), grads.sample_count, opt))
        server.global_model = server.global_model.with_params(host_model.params())
        server.optimizer = opt
        world.consumed_samples += grads.sample_count
    return _end_iteration(world, start)


# --- strategy objects and the outer loop ------------------------------------

class Strategy:
    """Binds a ``StrategyConfig`` to a world; the chunk schedule is built once and reused."""

    def __init__(self, cfg: StrategyConfig):
        self.cfg = cfg
        self.schedule: Schedule | None = None
        self.hosts: HostAssignment | None = None

    @property
    def name(self) -> str:
        return self.cfg.label

    def prepare(self, world: World) -> None:
        cfg = self.cfg
        if cfg.kind not in ("proposed", "proposed_semi"):
            return
        for c in world.clients:
            c.rechunk(cfg.chunk_size)
        sizes = [c.size for c in world.clients]
        if cfg.kind == "proposed":
            self.schedule = generate_instructions(sizes, cfg.batch_size, cfg.parallel_window_size)
        else:
            self.schedule, self.hosts = generate_instructions_with_hosts(sizes, cfg.batch_size,
                                                                         cfg.cluster_window_size)

    def run_iteration(self, world: World) -> tuple[MlpModel, float]:
        kind = self.cfg.kind
        if kind in ("proposed", "proposed_semi") and self.schedule is None:
            self.prepare(world)
        if kind == "fedavg":
            return fedavg_iteration(world, self.cfg)
        if kind == "wfedavg":
            return wfedavg_iteration(world, self.cfg)
        if kind == "cycle":
            return cycle_iteration(world, self.cfg)
        if kind == "proposed":
            return proposed_iteration(world, self.cfg, self.schedule)
        return semicentral_iteration(world, self.cfg, self.schedule, self.hosts)


def run_training(strategy: Strategy, world: World, iterations: int,
                 eval_hook: Callable[[MlpModel, int, float], object]) -> list:
    """Run ``iterations`` global iterations; ``eval_hook(model, round, sim_time)`` is
    called on the initial model and after every iteration."""
    strategy.prepare(world)
    series = [eval_hook(world.server.global_model, 0, world.clock.now)]
    for r in range(1, iterations + 1):
        model, _ = strategy.run_iteration(world)
        series.append(eval_hook(model, r, world.clock.now))
    return series
