"""Per-node train/aggregate state machine driven by the simulator.

Nodes of sample ``k`` push their trained models to the aggregators of round
``k + 1``; an aggregator that has collected ``ceil(sf * s)`` models for a
round averages them, samples the round's trainers and pushes the average to
each of them.  Trainers start on the first copy they receive, so with
several aggregators the fastest one sets the pace.  Views ride along with
every model transfer.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .learning.model import Model, aggregate_models
from .membership import (
    EventKind,
    LocalIdentity,
    View,
    apply_membership_event,
    auto_rejoin_due,
    request_join,
    request_leave,
)
from .messages import CONTROL_BYTES, HEADER_BYTES, Aggregate, Joined, Left, Ping, Pong, Train, ViewSnapshot
from .sampling import CompletedSample, Probe, Stalled, backoff_delay, begin_sample, rank_candidates


@dataclass(frozen=True)
class ProtocolConfig:
    s: int
    a: int
    sf: float
    timeout: float  # Δt, ms
    window: int  # Δk, rounds
    fixed_aggregator: int | None = None
    auto_rejoin: bool = True
    control_bytes: int = CONTROL_BYTES
    header_bytes: int = HEADER_BYTES

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("sample size s must be >= 1")
        if not 1 <= self.a <= self.s:
            raise ValueError("need 1 <= a <= s")
        if not 0.5 < self.sf <= 1:
            raise ValueError("success fraction must satisfy 0.5 < sf <= 1")
        if self.timeout <= 0:
            raise ValueError("ping timeout must be positive")
        if self.window < 1:
            raise ValueError("activity window must be >= 1")
        if self.fixed_aggregator is not None and self.a != 1:
            raise ValueError("a fixed aggregator requires a = 1")

    @property
    def threshold(self) -> int:
        """Models an aggregator waits for: ceil(sf * s), guarded against float noise."""
        return max(1, math.ceil(round(self.sf * self.s, 9)))


def round_transfer_count(s: int, a: int, completed_aggregators: int) -> int:
    """Model transfers of one failure-free round: trainers to aggregators, then back."""
    if not 1 <= completed_aggregators <= a:
        raise ValueError("completed aggregators must be within [1, a]")
    return s * a + completed_aggregators * s


def first_sample(initial_nodes, s: int, fixed_aggregator: int | None = None) -> list[int]:
    nodes = [j for j in initial_nodes if j != fixed_aggregator]
    return rank_candidates(nodes, 1).head(s)


@dataclass
class _SampleJob:
    id: int
    k: int
    size: int
    started: float
    on_done: Callable[[tuple[int, ...]], None]
    attempt: int = 0
    request: object = None
    last_stall: Stalled | None = None


class ModestNode:
    """One participant.  All state is private to the node and touched only by its handlers."""

    def __init__(self, node_id: int, sim, config: ProtocolConfig, trainer, compute_time,
                 view: View | None = None, recorder=None, counter: int = 0, seed: int = 0):
        self.node_id = node_id
        self.sim = sim
        self.config = config
        self.trainer = trainer
        self.compute_time = compute_time
        self.recorder = recorder
        self.view = view if view is not None else View()
        self.identity = LocalIdentity(node_id, counter)
        self.rng = np.random.default_rng([seed, node_id, 0x5EED])

        self.pending_models: dict[int, Model] = {}
        self.k_agg = 0
        self.k_train = 0
        self.aggregated_round = 0
        self.train_started_round = 0
        self.training_task = None
        self.activations: list[float] = []
        self._last_active_round = 0
        self._rejoined_at: float | None = None
        self._jobs: dict[int, _SampleJob] = {}
        self._job_ids = itertools.count()

    # -- helpers
    @property
    def now(self) -> float:
        return self.sim.now

    def _send(self, dst: int, msg) -> None:
        self.sim.send(self.node_id, dst, msg)

    def _after_view_change(self) -> None:
        rec = self.recorder
        if rec is None or not rec.joins:
            return
        registry = self.view.registry
        for joiner, jr in rec.joins.items():
            if self.node_id in jr.observers and self.node_id not in jr.seen \
                    and registry.is_registered(joiner):
                rec.record_view_inclusion(joiner, self.node_id, self.now)

    def _merge(self, msg) -> None:
        if msg.view is not None:
            self.view.merge(msg.view)
        self.view.activity.update(self.node_id, msg.k)
        self._after_view_change()
        self._note_activation(msg.k)

    def _note_activation(self, k: int) -> None:
        # one timestamp per round this node takes part in
        if k <= self._last_active_round:
            return
        self._last_active_round = k
        self.activations.append(self.now)
        self._arm_rejoin()

    def _arm_rejoin(self) -> None:
        if self.config.auto_rejoin and len(self.activations) >= 2:
            gap = (self.activations[-1] - self.activations[0]) / (len(self.activations) - 1)
            if gap > 0:
                self.sim.set_timer(self.node_id, self.config.window * gap * (1 + 1e-9), ("rejoin",))

    def candidates(self, k: int) -> list[int]:
        cands = self.view.candidates(k, self.config.window)
        if self.config.fixed_aggregator is not None:
            cands = [j for j in cands if j != self.config.fixed_aggregator]
        return cands

    # -- sampling
    def sample(self, k: int, size: int, on_done: Callable[[tuple[int, ...]], None]) -> None:
        job = _SampleJob(next(self._job_ids), k, size, self.now, on_done)
        self._jobs[job.id] = job
        self._attempt(job)

    def _attempt(self, job: _SampleJob) -> None:
        ranked = rank_candidates(self.candidates(job.k), job.k)
        job.request, pings = begin_sample(ranked, job.size)
        for j in pings:
            self._send(j, Ping(job.k, self.node_id, self.config.control_bytes))
        self.sim.set_timer(self.node_id, self.config.timeout, ("ping", job.id))

    def _advance(self, job: _SampleJob, outcome) -> None:
        if isinstance(outcome, CompletedSample):
            self.sim.cancel_timer(self.node_id, ("ping", job.id))
            del self._jobs[job.id]
            if self.recorder is not None:
                self.recorder.record_sample(job.started, self.node_id, job.k, job.size,
                                            self.now - job.started, job.attempt + 1)
            job.on_done(outcome.members)
        elif isinstance(outcome, Probe):
            self._send(outcome.node, Ping(job.k, self.node_id, self.config.control_bytes))
            self.sim.set_timer(self.node_id, self.config.timeout, ("ping", job.id))
        elif isinstance(outcome, Stalled):
            job.last_stall = outcome
            delay = backoff_delay(job.attempt, self.config.timeout)
            job.attempt += 1
            self.sim.set_timer(self.node_id, delay, ("retry", job.id))

    def diagnose(self) -> list[dict]:
        out = []
        for job in self._jobs.values():
            if job.last_stall is None:
                continue
            cands = self.candidates(job.k)
            out.append({
                "node": self.node_id,
                "round": job.k,
                "size": job.size,
                "attempts": job.attempt,
                "responders": job.last_stall.responders,
                "candidates": len(cands),
                "live_candidates": sum(1 for j in cands if self.sim.is_up(j)),
            })
        return out

    # -- event entry points
    def on_message(self, src: int, msg) -> None:
        kind = msg.kind
        if kind == "ping":
            self._send(msg.sender, Pong(msg.k, self.node_id, self.config.control_bytes))
        elif kind == "pong":
            for job in list(self._jobs.values()):
                if job.k == msg.k and job.request is not None and job.id in self._jobs:
                    self._advance(job, job.request.on_pong(msg.sender))
        elif kind == "aggregate":
            self.on_aggregate(msg)
        elif kind == "train":
            self.on_train(msg)
        elif kind == "joined":
            apply_membership_event(self.view, msg.node, msg.counter, EventKind.JOINED)
            self._after_view_change()
        elif kind == "left":
            apply_membership_event(self.view, msg.node, msg.counter, EventKind.LEFT)
            self._after_view_change()
        else:
            raise ValueError(f"unexpected message kind {kind!r}")

    def on_timer(self, tag) -> None:
        if tag[0] == "ping":
            job = self._jobs.get(tag[1])
            if job is not None:
                self._advance(job, job.request.on_ping_timeout())
        elif tag[0] == "retry":
            job = self._jobs.get(tag[1])
            if job is not None:
                self._attempt(job)
        elif tag[0] == "rejoin":
            # after a rejoin, measure silence from the rejoin instead of the last activation
            shift = 0.0
            if self._rejoined_at is not None and self.activations:
                shift = max(0.0, self._rejoined_at - self.activations[-1])
            if auto_rejoin_due(self.activations, self.config.window, self.now - shift):
                self.join()
                # still ignored after another full wait: advertise again
                self._rejoined_at = self.now
                self._arm_rejoin()

    # -- aggregation
    def on_aggregate(self, msg: Aggregate) -> None:
        self._merge(msg)
        k = msg.k
        if k > self.k_agg:
            self.k_agg = k
            self.pending_models = {msg.sender: msg.model}
        elif k == self.k_agg and self.aggregated_round < k:
            self.pending_models[msg.sender] = msg.model
        else:
            return  # stale, or this round was already aggregated here
        if len(self.pending_models) >= self.config.threshold and self.aggregated_round < k:
            self.aggregated_round = k
            models = [self.pending_models[j] for j in sorted(self.pending_models)]
            self.pending_models = {}
            averaged = aggregate_models(models)
            snapshot = ViewSnapshot.of(self.view)
            self.sim.note_progress(k)

            def push(members, k=k, averaged=averaged, snapshot=snapshot):
                if self.recorder is not None:
                    self.recorder.round(k, self.now).completed_aggregators += 1
                    self.recorder.record_round(k, self.now, averaged)
                if self.sim.stopped:
                    return  # the run ended on this very round; nothing further is delivered
                for j in members:
                    self._send(j, Train(k, averaged, snapshot, self.node_id, self.config.header_bytes))

            self.sample(k, self.config.s, push)

    # -- training
    def on_train(self, msg: Train) -> None:
        self._merge(msg)
        k = msg.k
        if k > self.k_train:
            self.k_train = k
            if self.training_task is not None:
                self.training_task.cancel()
                self.training_task = None
        if k == self.k_train and self.training_task is None and self.train_started_round < k:
            self.train_started_round = k
            duration = self.compute_time.duration(self.node_id, k)
            self.training_task = self.sim.schedule_compute(self.node_id, duration, (k, msg.model))
            if self.recorder is not None:
                self.recorder.round(k, self.now).trainers.add(self.node_id)

    def on_compute_done(self, handle) -> None:
        if handle is not self.training_task:
            return
        self.training_task = None
        k, model = handle.payload
        trained = self.trainer(model, self.node_id, k)
        snapshot = ViewSnapshot.of(self.view)

        def push(members, k=k, trained=trained, snapshot=snapshot):
            for j in members:
                self._send(j, Aggregate(k + 1, trained, snapshot, self.node_id,
                                        self.config.header_bytes))

        if self.config.fixed_aggregator is not None:
            push((self.config.fixed_aggregator,))
        else:
            self.sample(k + 1, self.config.a, push)

    def bootstrap(self, init_model: Model) -> None:
        """Start round 1 on a member of the first sample (self-delivered, not a transfer)."""
        self.on_train(Train(1, init_model, ViewSnapshot.of(self.view), self.node_id))

    # -- membership
    def _peers(self) -> frozenset[int]:
        others = sorted(self.view.registry.registered() - {self.node_id})
        if not others:
            return frozenset()
        size = min(self.config.s, len(others))
        return frozenset(int(j) for j in self.rng.choice(others, size=size, replace=False))

    def join(self, peers=None) -> None:
        if peers is not None:
            self.identity.bootstrap_peers = frozenset(peers)
        else:
            self.identity.bootstrap_peers = self._peers() or self.identity.bootstrap_peers
        if not self.identity.bootstrap_peers:
            return
        self.view, msgs = request_join(self.identity, self.view)
        for m in msgs:
            self._send(m.to, Joined(m.node, m.counter, self.config.control_bytes))
        self._after_view_change()

    def on_join(self) -> None:
        self.join(self.identity.bootstrap_peers or None)

    def on_leave(self) -> None:
        self.identity.bootstrap_peers = self._peers() or self.identity.bootstrap_peers
        if not self.identity.bootstrap_peers:
            return
        self.view, msgs = request_leave(self.identity, self.view)
        for m in msgs:
            self._send(m.to, Left(m.node, m.counter, self.config.control_bytes))

    def on_crash(self) -> None:
        self._jobs.clear()
        self.training_task = None
        self.pending_models = {}

    def on_recover(self) -> None:
        self.join()
