"""Reference learners that share the simulator and byte accounting with MoDeST.

* FedAvg: a fixed server (the node with the lowest median latency) samples
  ``s`` clients per round, sends them the global model and averages what
  comes back.
* D-SGD: every node trains every round, sends its model to one peer of a
  one-peer exponential graph and averages with the model it receives.  A
  global barrier separates rounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .learning.model import Model, aggregate_models
from .messages import HEADER_BYTES, Aggregate, Gossip, Train
from .sampling import rank_candidates


def pick_server(latency, nodes: Sequence[int]) -> int:
    """Node with the lowest median one-way latency to all others (ties: lowest id)."""
    nodes = sorted(nodes)
    return min(nodes, key=lambda j: (latency.median_delay(j, nodes), j))


def client_schedule(clients: Sequence[int], s: int, kind: str = "hash", seed: int = 0):
    """Per-round client sampler: hash ranking (same order MoDeST uses) or seeded uniform draws."""
    clients = sorted(clients)
    if kind == "hash":
        return lambda k: rank_candidates(clients, k).head(s)
    if kind == "random":
        def draw(k):
            rng = np.random.default_rng([seed, k, 0xFEDA])
            return sorted(int(j) for j in rng.choice(clients, size=min(s, len(clients)), replace=False))
        return draw
    raise ValueError(f"unknown client schedule {kind!r}")


def fedavg_round(model: Model, k: int, server: int, clients: Sequence[int], trainer,
                 schedule) -> tuple[Model, list[tuple[int, int]]]:
    """One synchronous FedAvg round: returns the new global model and the (src, dst) transfers."""
    chosen = list(schedule(k))
    transfers = [(server, j) for j in chosen]
    updates = {j: trainer(model, j, k) for j in chosen}
    transfers += [(j, server) for j in chosen]
    return aggregate_models(updates[j] for j in sorted(updates)), transfers


class FedAvgServer:
    def __init__(self, node_id: int, sim, schedule, recorder=None, header_bytes: int = HEADER_BYTES):
        self.node_id = node_id
        self.sim = sim
        self.schedule = schedule
        self.recorder = recorder
        self.header_bytes = header_bytes
        self.k = 0
        self.model: Model | None = None
        self.expected: set[int] = set()
        self.received: dict[int, Model] = {}

    def start(self, init_model: Model) -> None:
        self.model = init_model
        self._start_round(1)

    def _start_round(self, k: int) -> None:
        self.k = k
        chosen = list(self.schedule(k))
        self.expected = set(chosen)
        self.received = {}
        if self.recorder is not None:
            self.recorder.round(k, self.sim.now).trainers.update(chosen)
        for j in chosen:
            self.sim.send(self.node_id, j, Train(k, self.model, None, self.node_id, self.header_bytes))

    def on_message(self, src: int, msg) -> None:
        if msg.kind != "aggregate" or msg.k != self.k + 1 or src not in self.expected:
            return
        self.received[src] = msg.model
        if len(self.received) == len(self.expected):
            self.model = aggregate_models(self.received[j] for j in sorted(self.received))
            k = self.k + 1
            self.sim.note_progress(k)
            if self.recorder is not None:
                self.recorder.record_round(k, self.sim.now, self.model)
                self.recorder.round(k, self.sim.now).completed_aggregators = 1
            if not self.sim.stopped:
                self._start_round(k)

    def on_timer(self, tag) -> None:
        pass


class FedAvgClient:
    def __init__(self, node_id: int, sim, trainer, compute_time, header_bytes: int = HEADER_BYTES):
        self.node_id = node_id
        self.sim = sim
        self.trainer = trainer
        self.compute_time = compute_time
        self.header_bytes = header_bytes

    def on_message(self, src: int, msg) -> None:
        if msg.kind == "train":
            duration = self.compute_time.duration(self.node_id, msg.k)
            self.sim.schedule_compute(self.node_id, duration, (src, msg.k, msg.model))

    def on_compute_done(self, handle) -> None:
        server, k, model = handle.payload
        trained = self.trainer(model, self.node_id, k)
        self.sim.send(self.node_id, server, Aggregate(k + 1, trained, None, self.node_id,
                                                      self.header_bytes))

    def on_timer(self, tag) -> None:
        pass


# D-SGD --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentialGraphSchedule:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("an exponential graph needs at least two nodes")

    @property
    def offsets(self) -> list[int]:
        out = []
        for m in range(math.ceil(math.log2(self.n))):
            off = pow(2, m, self.n)
            if off and off not in out:
                out.append(off)
        return out

    def offset(self, k: int) -> int:
        """Peer offset used in round ``k`` (rounds start at 1)."""
        offs = self.offsets
        return offs[(k - 1) % len(offs)]

    def peer_out(self, i: int, k: int) -> int:
        return (i + self.offset(k)) % self.n

    def peer_in(self, i: int, k: int) -> int:
        return (i - self.offset(k)) % self.n


def dsgd_round(models: Sequence[Model], schedule: ExponentialGraphSchedule, k: int,
               trainer: Callable[[Model, int, int], Model]):
    """Train every node then average pairwise along round ``k``'s edges.

    ``models[i]`` belongs to node ``i``.  Returns the new models and the
    ``(src, dst)`` transfer list (exactly ``n`` entries).
    """
    trained = [trainer(m, i, k) for i, m in enumerate(models)]
    transfers = [(i, schedule.peer_out(i, k)) for i in range(schedule.n)]
    out = [pairwise_average(trained[i], trained[schedule.peer_in(i, k)]) for i in range(schedule.n)]
    return out, transfers


def pairwise_average(own: Model, received: Model) -> Model:
    return Model((own.params + received.params) / 2.0, own.bytes_per_param)


def dsgd_report(models: Sequence[Model], evaluate_fn) -> tuple[float, float]:
    """Mean and (population) standard deviation of the per-node metric."""
    metrics = np.array([evaluate_fn(m)[1] for m in models])
    return float(metrics.mean()), float(metrics.std())


def consensus_distance(models: Sequence[Model]) -> float:
    """Mean pairwise L2 distance between local models."""
    P = np.stack([m.params for m in models])
    n = len(P)
    if n < 2:
        return 0.0
    sq = np.sum(P ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * P @ P.T, 0.0)
    iu = np.triu_indices(n, 1)
    return float(np.mean(np.sqrt(d2[iu])))


class DsgdNode:
    def __init__(self, node_id: int, index: int, driver, trainer, compute_time):
        self.node_id = node_id
        self.index = index
        self.driver = driver
        self.trainer = trainer
        self.compute_time = compute_time
        self.model: Model | None = None
        self._trained: Model | None = None
        self._inbox: dict[int, Model] = {}
        self.k = 0

    def start_round(self, k: int) -> None:
        self.k = k
        self._trained = None
        duration = self.compute_time.duration(self.node_id, k)
        self.driver.sim.schedule_compute(self.node_id, duration, k)

    def on_compute_done(self, handle) -> None:
        k = handle.payload
        self._trained = self.trainer(self.model, self.node_id, k)
        peer = self.driver.node_at(self.driver.schedule.peer_out(self.index, k))
        self.driver.sim.send(self.node_id, peer,
                             Gossip(k, self._trained, None, self.node_id, self.driver.header_bytes))
        self._maybe_finish()

    def on_message(self, src: int, msg) -> None:
        if msg.kind == "gossip":
            self._inbox[msg.k] = msg.model
            self._maybe_finish()

    def _maybe_finish(self) -> None:
        k = self.k
        if self._trained is None or k not in self._inbox:
            return
        self.model = pairwise_average(self._trained, self._inbox.pop(k))
        self._trained = None
        self.driver.node_done(self)

    def on_timer(self, tag) -> None:
        pass


class DsgdDriver:
    """Global round barrier for D-SGD nodes (coordination itself is not accounted)."""

    def __init__(self, sim, node_ids: Sequence[int], trainer, compute_time, recorder=None,
                 evaluate_fn=None, header_bytes: int = HEADER_BYTES, max_rounds: int | None = None):
        self.sim = sim
        self.schedule = ExponentialGraphSchedule(len(node_ids))
        self.node_ids = list(node_ids)
        self.recorder = recorder
        self.evaluate_fn = evaluate_fn
        self.header_bytes = header_bytes
        self.max_rounds = max_rounds
        self.nodes = [DsgdNode(j, i, self, trainer, compute_time) for i, j in enumerate(self.node_ids)]
        self._done = 0
        self.k = 0
        self.history: list[tuple[float, float]] = []  # (mean metric, std) per round

    def node_at(self, index: int) -> int:
        return self.node_ids[index]

    def start(self, init_model: Model) -> None:
        for node in self.nodes:
            node.model = init_model
        self._record(1)
        self._start_round(1)

    def _start_round(self, k: int) -> None:
        self.k = k
        self._done = 0
        if self.recorder is not None:
            self.recorder.round(k, self.sim.now).trainers.update(self.node_ids)
        for node in self.nodes:
            node.start_round(k)

    def node_done(self, node: DsgdNode) -> None:
        self._done += 1
        if self._done == len(self.nodes):
            k = self.k + 1
            self.sim.note_progress(k)
            self._record(k)
            if self.max_rounds is not None and k > self.max_rounds:
                self.sim.stop()
                return
            self.sim.call_at(self.sim.now, lambda: self._start_round(k))

    def _record(self, k: int) -> None:
        if self.evaluate_fn is None:
            return
        mean, std = dsgd_report([n.model for n in self.nodes], self.evaluate_fn)
        self.history.append((mean, std))
        if self.recorder is not None:
            rec = self.recorder.round(k, self.sim.now)
            rec.metric = mean
            self.recorder.current_round = max(self.recorder.current_round, k)
            self.recorder.record_metric(self.sim.now, k, mean)
