"""Deterministic discrete-event network simulator.

Events run in ``(virtual time, sequence number)`` order on a single thread.
Messages are delayed by a latency model, silently dropped when the receiver
is down at delivery time, and accounted in a byte ledger.  Timers and
compute tasks belong to a node incarnation: a crash voids them.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

import numpy as np

from .metrics import ByteLedger

log = logging.getLogger(__name__)

FAULT_ACTIONS = ("crash", "recover", "join", "leave")


class Node(Protocol):
    node_id: int

    def on_message(self, src: int, msg: Any) -> None: ...
    def on_timer(self, tag: Any) -> None: ...


# Latency --------------------------------------------------------------------------

class LatencyModel:
    """One-way delays between sites; node ``j`` sits at site ``j % n_sites``."""

    def __init__(self, one_way_ms, self_delay: float = 0.0, min_delay: float = 1.0):
        matrix = np.asarray(one_way_ms, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("latency matrix must be square")
        if np.any(matrix < 0) or not np.all(np.isfinite(matrix)):
            raise ValueError("latencies must be finite and non-negative")
        if min_delay <= 0:
            raise ValueError("min_delay must be positive")
        self.matrix = matrix
        self.self_delay = float(self_delay)
        self.min_delay = float(min_delay)
        self._rows = matrix.tolist()
        self.n_sites = matrix.shape[0]

    @classmethod
    def from_rtt(cls, rtt_ms, **kwargs) -> "LatencyModel":
        return cls(np.asarray(rtt_ms, dtype=np.float64) / 2.0, **kwargs)

    @classmethod
    def from_csv(cls, path, rtt: bool = True, **kwargs) -> "LatencyModel":
        """Headerless CSV, milliseconds, row ``i`` = source site ``i``."""
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls.from_rtt(rows, **kwargs) if rtt else cls(rows, **kwargs)

    @classmethod
    def uniform(cls, n_nodes: int, lo: float, hi: float, seed: int = 0, **kwargs) -> "LatencyModel":
        """Symmetric per-pair one-way delays drawn uniformly from ``[lo, hi]``."""
        if not 0 < lo <= hi:
            raise ValueError("need 0 < lo <= hi")
        rng = np.random.default_rng([seed, 0x1A7])
        m = rng.uniform(lo, hi, size=(n_nodes, n_nodes))
        m = np.triu(m, 1)
        m = m + m.T
        np.fill_diagonal(m, 0.0)
        return cls(m, **kwargs)

    @classmethod
    def geographic(cls, n_sites: int, seed: int = 0, access_ms: tuple[float, float] = (2.0, 60.0),
                   ms_per_radian: float = 60.0, **kwargs) -> "LatencyModel":
        """Sites scattered on a sphere plus a per-site access delay.

        A stand-in for measured inter-city matrices: delays have a distance
        component and a site-specific last-mile component, so some sites are
        systematically better connected than others.
        """
        rng = np.random.default_rng([seed, 0x6E0])
        pts = rng.standard_normal((n_sites, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        angle = np.arccos(np.clip(pts @ pts.T, -1.0, 1.0))
        access = rng.uniform(*access_ms, size=n_sites)
        one_way = angle * ms_per_radian + access[:, None] + access[None, :]
        np.fill_diagonal(one_way, 2 * access)
        return cls(one_way, **kwargs)

    def site(self, node: int) -> int:
        return node % self.n_sites

    def delay(self, src: int, dst: int) -> float:
        if src == dst:
            return self.self_delay
        d = self._rows[src % self.n_sites][dst % self.n_sites]
        return d if d > self.min_delay else self.min_delay

    def max_delay(self, nodes: Iterable[int]) -> float:
        nodes = list(nodes)
        return max((self.delay(a, b) for a in nodes for b in nodes if a != b), default=0.0)

    def median_delay(self, node: int, others: Iterable[int]) -> float:
        return float(np.median([self.delay(node, j) for j in others if j != node]))


# Compute times --------------------------------------------------------------------

@dataclass(frozen=True)
class ComputeTimeModel:
    """Training duration per (node, round): constant or lognormal around ``median_ms``.

    ``node_spread`` adds a fixed per-node speed factor (lognormal sigma), so
    some nodes are persistently slower than others.
    """

    median_ms: float = 100.0
    sigma: float = 0.0
    node_spread: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.median_ms <= 0 or self.sigma < 0 or self.node_spread < 0:
            raise ValueError("invalid compute-time parameters")

    def node_factor(self, node: int) -> float:
        if not self.node_spread:
            return 1.0
        return float(np.exp(self.node_spread * np.random.default_rng([self.seed, 0xC0DE, node])
                            .standard_normal()))

    def duration(self, node: int, k: int) -> float:
        base = self.median_ms * self.node_factor(node)
        if not self.sigma:
            return base
        z = np.random.default_rng([self.seed, node, k]).standard_normal()
        return float(base * np.exp(self.sigma * z))

    def quantile(self, q: float) -> float:
        from statistics import NormalDist
        z = NormalDist().inv_cdf(q)
        return float(self.median_ms * np.exp((self.sigma + self.node_spread) * z))


# Faults ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class FaultAction:
    time: float
    action: str
    node: int

    def __post_init__(self):
        if self.action not in FAULT_ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")
        if self.time < 0:
            raise ValueError("fault times must be non-negative")


class FaultSchedule(list):
    """Time-ordered fault actions."""

    def __init__(self, actions: Iterable[FaultAction] = ()):
        actions = list(actions)
        if any(b.time < a.time for a, b in zip(actions, actions[1:])):
            raise ValueError("fault schedule times must be non-decreasing")
        super().__init__(actions)

    @classmethod
    def from_entries(cls, entries) -> "FaultSchedule":
        return cls(FaultAction(float(e["time_ms"]), str(e["action"]), int(e["node"]))
                   for e in entries)

    def max_concurrent(self, action: str = "crash") -> int:
        """Largest number of ``action`` entries sharing one timestamp."""
        counts: dict[float, int] = {}
        for a in self:
            if a.action == action:
                counts[a.time] = counts.get(a.time, 0) + 1
        return max(counts.values(), default=0)

    def nodes(self, action: str) -> list[int]:
        return [a.node for a in self if a.action == action]


def staggered(action: str, nodes: Iterable[int], start: float, interval: float) -> FaultSchedule:
    return FaultSchedule(FaultAction(start + i * interval, action, j) for i, j in enumerate(nodes))


# Simulator ------------------------------------------------------------------------

class SimulationStalled(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"no round progress since t={report['last_progress_ms']:.1f}ms "
                         f"(now {report['time_ms']:.1f}ms)")
        self.report = report


@dataclass
class ComputeHandle:
    node: int
    payload: Any
    incarnation: int
    cancelled: bool = False

    def cancel(self):
        self.cancelled = True


@dataclass
class RunResult:
    status: str  # "horizon" | "quiescent" | "stopped"
    time: float
    events: int
    digest: str


@dataclass
class TransferRecord:
    time: float
    src: int
    dst: int
    kind: str
    round: int | None
    model_bytes: int
    overhead_bytes: int
    delivered: bool | None = None


_DELIVER, _TIMER, _COMPUTE, _FAULT, _CALL = range(5)


class Simulator:
    def __init__(self, latency: LatencyModel, stall_window: float | None = None,
                 record_events: bool = False, ledger: ByteLedger | None = None):
        self.latency = latency
        self.now = 0.0
        self.stall_window = stall_window
        self.nodes: dict[int, Any] = {}
        self.up: set[int] = set()
        self.incarnation: dict[int, int] = {}
        self.ledger = ledger if ledger is not None else ByteLedger()
        self.transfers: list[TransferRecord] = []
        self.events: list[tuple] | None = [] if record_events else None
        self.fault_listeners: list[Callable[[FaultAction], None]] = []
        self.last_progress = 0.0
        self.progress_round = 0
        self._tracking_progress = False
        self._queue: list[tuple] = []
        self._seq = 0
        self._timers: dict[tuple[int, Any], int] = {}
        self._digest = hashlib.blake2b(digest_size=16)
        self._stopped = False
        self._processed = 0

    # -- setup
    def add_node(self, node, up: bool = True) -> None:
        j = node.node_id
        self.nodes[j] = node
        self.incarnation.setdefault(j, 0)
        self.ledger.ensure(j)
        if up:
            self.up.add(j)

    def is_up(self, node: int) -> bool:
        return node in self.up

    def _push(self, time: float, kind: int, *payload) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (time, seq, kind, payload))
        return seq

    # -- messaging
    def send(self, src: int, dst: int, msg) -> None:
        if src not in self.up:
            return
        model_bytes = getattr(msg, "model_bytes", 0)
        overhead = msg.overhead_bytes
        self.ledger.record_send(src, model_bytes, overhead)
        rec = TransferRecord(self.now, src, dst, msg.kind, getattr(msg, "k", None),
                             model_bytes, overhead)
        self.transfers.append(rec)
        self._push(self.now + self.latency.delay(src, dst), _DELIVER, src, dst, msg, rec)

    # -- timers and compute
    def set_timer(self, node: int, delay: float, tag) -> None:
        if delay <= 0:
            raise ValueError("timer delay must be positive")
        seq = self._push(self.now + delay, _TIMER, node, tag, self.incarnation[node])
        self._timers[(node, tag)] = seq

    def cancel_timer(self, node: int, tag) -> None:
        self._timers.pop((node, tag), None)

    def schedule_compute(self, node: int, duration: float, payload) -> ComputeHandle:
        if node not in self.up:
            raise RuntimeError(f"node {node} is down")
        handle = ComputeHandle(node, payload, self.incarnation[node])
        self._push(self.now + duration, _COMPUTE, handle)
        return handle

    def call_at(self, time: float, fn: Callable[[], None]) -> None:
        self._push(max(time, self.now), _CALL, fn)

    def schedule_faults(self, schedule: Iterable[FaultAction]) -> None:
        for action in schedule:
            if action.action in ("crash", "recover", "leave") and action.node not in self.nodes:
                raise ValueError(f"fault references unknown node {action.node}")
            self._push(action.time, _FAULT, action)

    # -- progress and stopping
    def note_progress(self, round_: int) -> None:
        self._tracking_progress = True
        if round_ > self.progress_round:
            self.progress_round = round_
            self.last_progress = self.now

    def stop(self) -> None:
        self._stopped = True

    @property
    def stopped(self) -> bool:
        return self._stopped

    # -- faults
    def crash(self, node: int) -> None:
        if node in self.up:
            self.up.discard(node)
            self.incarnation[node] += 1
            hook = getattr(self.nodes[node], "on_crash", None)
            if hook:
                hook()

    def recover(self, node: int) -> None:
        if node not in self.up:
            self.up.add(node)
            hook = getattr(self.nodes[node], "on_recover", None)
            if hook:
                hook()

    def _apply_fault(self, action: FaultAction) -> None:
        j = action.node
        if action.action == "crash":
            self.crash(j)
        elif action.action == "recover":
            self.recover(j)
        elif action.action == "join":
            if j not in self.nodes:
                raise RuntimeError(f"no node object registered for joiner {j}")
            self.up.add(j)
            self.nodes[j].on_join()
        elif action.action == "leave":
            if j in self.up:
                self.nodes[j].on_leave()
                self.crash(j)
        for listener in self.fault_listeners:
            listener(action)

    # -- main loop
    def _record(self, entry: tuple) -> None:
        self._digest.update(repr(entry).encode())
        if self.events is not None:
            self.events.append(entry)

    def stall_report(self) -> dict:
        stalled = []
        for j in sorted(self.up):
            diagnose = getattr(self.nodes[j], "diagnose", None)
            if diagnose:
                stalled.extend(diagnose())
        return {
            "time_ms": self.now,
            "last_progress_ms": self.last_progress,
            "last_round": self.progress_round,
            "live_nodes": len(self.up),
            "pending_samples": stalled,
        }

    def run(self, until: float | None = None) -> RunResult:
        queue = self._queue
        while queue and not self._stopped:
            time = queue[0][0]
            if until is not None and time > until:
                self.now = until
                return self._result("horizon")
            if (self._tracking_progress and self.stall_window is not None
                    and time - self.last_progress > self.stall_window):
                self.now = self.last_progress + self.stall_window
                raise SimulationStalled(self.stall_report())
            time, seq, kind, payload = heapq.heappop(queue)
            self.now = time
            self._processed += 1
            if kind == _DELIVER:
                src, dst, msg, rec = payload
                delivered = dst in self.up
                rec.delivered = delivered
                self._record((time, seq, "msg", src, dst, msg.kind, rec.round, delivered))
                if delivered:
                    self.ledger.record_receive(dst, rec.model_bytes, rec.overhead_bytes)
                    self.nodes[dst].on_message(src, msg)
            elif kind == _TIMER:
                node, tag, inc = payload
                if self._timers.get((node, tag)) != seq:
                    continue
                del self._timers[(node, tag)]
                if inc != self.incarnation[node] or node not in self.up:
                    continue
                self._record((time, seq, "timer", node, repr(tag)))
                self.nodes[node].on_timer(tag)
            elif kind == _COMPUTE:
                (handle,) = payload
                j = handle.node
                if handle.cancelled or handle.incarnation != self.incarnation[j] or j not in self.up:
                    continue
                self._record((time, seq, "compute", j))
                self.nodes[j].on_compute_done(handle)
            elif kind == _FAULT:
                (action,) = payload
                self._record((time, seq, "fault", action.action, action.node))
                self._apply_fault(action)
            else:
                (fn,) = payload
                self._record((time, seq, "call"))
                fn()
        if self._stopped:
            return self._result("stopped")
        if self._tracking_progress:
            # nothing left to happen but the protocol never finished: a permanent stall
            raise SimulationStalled(self.stall_report())
        return self._result("quiescent")

    def _result(self, status: str) -> RunResult:
        return RunResult(status, self.now, self._processed, self._digest.hexdigest())

    @property
    def digest(self) -> str:
        return self._digest.hexdigest()
