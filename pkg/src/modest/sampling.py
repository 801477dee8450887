"""Per-round ranking of candidates and liveness-probed sample selection.

Every node ranks the candidate set of round ``k`` by a 64-bit hash of
``node_id || k`` and then probes the ranking head with pings: the first
``size`` candidates in parallel, then one at a time until ``size`` have
answered.  Two nodes with the same candidates and the same liveness outcomes
end up with the same sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .membership import encode_node_id

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
HASH_SEED = 0x4D6F44655354  # arbitrary fixed constant, part of the ranking contract


def _mix(x: int) -> int:
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def hash_bytes(data: bytes) -> int:
    """64-bit avalanche hash of ``data``; input is absorbed in 8-byte big-endian words."""
    if len(data) % 8:
        data = data + b"\x00" * (8 - len(data) % 8)
    h = HASH_SEED
    for off in range(0, len(data), 8):
        h = _mix(h ^ int.from_bytes(data[off:off + 8], "big"))
    return h


def rank_digest(node: int, k: int) -> int:
    return hash_bytes(encode_node_id(node) + k.to_bytes(8, "big"))


def _mix_array(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def rank_digests(nodes: Sequence[int], k: int) -> np.ndarray:
    """Vectorised :func:`rank_digest` over many nodes for a single round."""
    ids = np.asarray(nodes, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix_array(np.uint64(HASH_SEED) ^ ids)
        return _mix_array(h ^ np.uint64(k))


@dataclass(frozen=True)
class RankedCandidates:
    round: int
    entries: tuple[tuple[int, int], ...]  # (digest, node), ascending

    @property
    def order(self) -> list[int]:
        return [node for _, node in self.entries]

    def head(self, size: int) -> list[int]:
        return [node for _, node in self.entries[:size]]

    def __len__(self) -> int:
        return len(self.entries)


def rank_candidates(candidates: Sequence[int], k: int) -> RankedCandidates:
    if k < 0:
        raise ValueError("round must be non-negative")
    nodes = sorted(set(candidates))
    if not nodes:
        return RankedCandidates(k, ())
    digests = rank_digests(nodes, k)
    # lexsort: last key is primary; ties fall back to node id order
    order = np.lexsort((np.asarray(nodes, dtype=np.uint64), digests))
    return RankedCandidates(k, tuple((int(digests[i]), nodes[i]) for i in order))


def sample_heads(candidates: Sequence[int], rounds: Sequence[int], size: int) -> np.ndarray:
    """Ranking heads for many rounds at once, shape ``(len(rounds), min(size, |candidates|))``.

    Row ``i`` equals ``rank_candidates(candidates, rounds[i]).head(size)``.
    """
    nodes = np.asarray(sorted(set(candidates)), dtype=np.uint64)
    ks = np.asarray(rounds, dtype=np.uint64)
    if np.any(np.asarray(rounds) < 0):
        raise ValueError("round must be non-negative")
    with np.errstate(over="ignore"):
        h = _mix_array(np.uint64(HASH_SEED) ^ nodes)
        digests = _mix_array(h[None, :] ^ ks[:, None])
    order = np.lexsort((np.broadcast_to(nodes, digests.shape), digests), axis=-1)
    return nodes[order[:, :size]].astype(np.int64)


@dataclass(frozen=True)
class Probe:
    """Ping ``node`` next and restart the Δt timer."""

    node: int


@dataclass(frozen=True)
class CompletedSample:
    round: int
    members: tuple[int, ...]  # rank order


@dataclass(frozen=True)
class Stalled:
    """The ranked list ran out before enough candidates answered."""

    round: int
    responders: int
    candidates: int


class SampleRequest:
    """State of one ``Sample(k, size)`` attempt on one node.

    The owner sends the pings returned by :func:`begin_sample`, arms a
    single Δt timer, and feeds back pongs and timer expiries.  The request
    never touches the network itself.
    """

    def __init__(self, ranked: RankedCandidates, size: int):
        if size < 1:
            raise ValueError("sample size must be >= 1")
        self.round = ranked.round
        self.target_size = size
        self.order = ranked.order
        self._rank = {node: i for i, node in enumerate(self.order)}
        self.responders: set[int] = set()
        self.pinged: set[int] = set()
        self.cursor = 0
        self.sequential = False
        self.result: CompletedSample | Stalled | None = None

    @property
    def done(self) -> bool:
        return self.result is not None

    def _start(self) -> list[int]:
        head = self.order[:self.target_size]
        self.pinged.update(head)
        self.cursor = len(head)
        return head

    def _complete(self) -> CompletedSample:
        members = sorted(self.responders, key=self._rank.__getitem__)[:self.target_size]
        self.result = CompletedSample(self.round, tuple(members))
        return self.result

    def on_pong(self, node: int) -> CompletedSample | Probe | None:
        if self.done or node not in self.pinged or node in self.responders:
            return None
        self.responders.add(node)
        if len(self.responders) >= self.target_size:
            return self._complete()
        if self.sequential and node == self.order[self.cursor - 1]:
            # the candidate we were waiting on answered: move on without waiting for Δt
            return self._next_probe()
        return None

    def on_ping_timeout(self) -> Probe | Stalled | None:
        if self.done:
            return None
        self.sequential = True
        return self._next_probe()

    def _next_probe(self) -> Probe | Stalled:
        if self.cursor >= len(self.order):
            self.result = Stalled(self.round, len(self.responders), len(self.order))
            return self.result
        node = self.order[self.cursor]
        self.cursor += 1
        self.pinged.add(node)
        return Probe(node)


def begin_sample(ranked: RankedCandidates, size: int) -> tuple[SampleRequest, list[int]]:
    """Open a request and return the candidates to ping in parallel."""
    request = SampleRequest(ranked, size)
    return request, request._start()


def select_aggregators(ranked: RankedCandidates, count: int) -> tuple[SampleRequest, list[int]]:
    return begin_sample(ranked, count)


def sample_all_live(candidates: Sequence[int], k: int, size: int) -> tuple[int, ...] | None:
    """Outcome of a sample when every candidate answers promptly."""
    request, pings = begin_sample(rank_candidates(candidates, k), size)
    for node in pings:
        result = request.on_pong(node)
        if isinstance(result, CompletedSample):
            return result.members
    return None


def backoff_delay(attempt: int, timeout: float) -> float:
    """Pause before retrying a stalled sample: Δt doubling per attempt, capped at 8Δt."""
    return min(timeout * (2 ** attempt), 8 * timeout)
