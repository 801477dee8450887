"""Node registry and activity records, merged into the views nodes gossip.

A view is a join-semilattice: merging keeps, per node, the event with the
larger counter and the larger activity round.  All module-level functions
are value-level (they never mutate their arguments); the classes also offer
in-place methods used by the simulated nodes on their own view.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

NODE_ID_BYTES = 8
VIEW_ENTRY_BYTES = NODE_ID_BYTES + 8 + 1 + 8


def encode_node_id(node: int) -> bytes:
    """Canonical byte encoding of a node identifier (unsigned 64-bit, big-endian)."""
    if not 0 <= node < 1 << 64:
        raise ValueError(f"node id out of range: {node!r}")
    return node.to_bytes(NODE_ID_BYTES, "big")


class EventKind(enum.Enum):
    JOINED = "joined"
    LEFT = "left"


class Registry:
    """Latest join/leave event per node, ordered by the node's own counter."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[int, tuple[int, EventKind]] | None = None):
        self._entries: dict[int, tuple[int, EventKind]] = dict(entries or {})

    @property
    def counters(self) -> dict[int, int]:
        return {j: c for j, (c, _) in self._entries.items()}

    @property
    def events(self) -> dict[int, EventKind]:
        return {j: e for j, (_, e) in self._entries.items()}

    def get(self, node: int) -> tuple[int, EventKind] | None:
        return self._entries.get(node)

    def update(self, node: int, counter: int, event: EventKind) -> bool:
        """Record ``event`` unless an equal or newer counter is already stored."""
        if counter < 0:
            raise ValueError("event counters are non-negative")
        current = self._entries.get(node)
        if current is None or current[0] < counter:
            self._entries[node] = (counter, event)
            return True
        return False

    def merge(self, other: "Registry") -> None:
        entries = self._entries
        for node, (counter, event) in other._entries.items():
            current = entries.get(node)
            if current is None or current[0] < counter:
                entries[node] = (counter, event)

    def registered(self) -> set[int]:
        return {j for j, (_, e) in self._entries.items() if e is EventKind.JOINED}

    def is_registered(self, node: int) -> bool:
        entry = self._entries.get(node)
        return entry is not None and entry[1] is EventKind.JOINED

    def copy(self) -> "Registry":
        return Registry(self._entries)

    def items(self):
        return self._entries.items()

    def __contains__(self, node: int) -> bool:
        return node in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Registry) and self._entries == other._entries

    def __repr__(self) -> str:
        body = ", ".join(f"{j}:({c},{e.value})" for j, (c, e) in sorted(self._entries.items()))
        return f"Registry({{{body}}})"


class ActivityTable:
    """Highest round in which each node is known to have been active."""

    __slots__ = ("_latest",)

    def __init__(self, latest: Mapping[int, int] | None = None):
        self._latest: dict[int, int] = dict(latest or {})

    @property
    def latest(self) -> dict[int, int]:
        return dict(self._latest)

    def get(self, node: int, default: int | None = None) -> int | None:
        return self._latest.get(node, default)

    def update(self, node: int, round_: int) -> None:
        if round_ < 0:
            raise ValueError("rounds are non-negative")
        old = self._latest.get(node, 0)
        self._latest[node] = old if old > round_ else round_

    def merge(self, other: "ActivityTable") -> None:
        latest = self._latest
        for node, round_ in other._latest.items():
            old = latest.get(node, 0)
            latest[node] = old if old > round_ else round_

    def estimate_round(self) -> int:
        return max(self._latest.values(), default=0)

    def copy(self) -> "ActivityTable":
        return ActivityTable(self._latest)

    def items(self):
        return self._latest.items()

    def __contains__(self, node: int) -> bool:
        return node in self._latest

    def __len__(self) -> int:
        return len(self._latest)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ActivityTable) and self._latest == other._latest

    def __repr__(self) -> str:
        return f"ActivityTable({dict(sorted(self._latest.items()))})"


@dataclass(eq=True)
class View:
    registry: Registry = field(default_factory=Registry)
    activity: ActivityTable = field(default_factory=ActivityTable)

    def merge(self, other: "View") -> None:
        self.registry.merge(other.registry)
        self.activity.merge(other.activity)

    def copy(self) -> "View":
        return View(self.registry.copy(), self.activity.copy())

    def candidates(self, k: int, window: int) -> list[int]:
        if window < 1:
            raise ValueError("activity window must be >= 1")
        threshold = k - window
        registry = self.registry
        return sorted(
            j for j, last in self.activity.items()
            if last > threshold and registry.is_registered(j)
        )

    def wire_size(self) -> int:
        """Bytes the view would occupy on the wire (accounting only, no codec)."""
        keys = set(j for j, _ in self.registry.items())
        keys.update(j for j, _ in self.activity.items())
        return VIEW_ENTRY_BYTES * len(keys)


# Value-level operations -------------------------------------------------------

def registered(registry: Registry) -> set[int]:
    return registry.registered()


def update_registry(registry: Registry, node: int, counter: int, event: EventKind) -> Registry:
    out = registry.copy()
    out.update(node, counter, event)
    return out


def merge_registry(registry: Registry, other: Registry) -> Registry:
    out = registry.copy()
    out.merge(other)
    return out


def update_activity(table: ActivityTable, node: int, round_: int) -> ActivityTable:
    out = table.copy()
    out.update(node, round_)
    return out


def merge_view(view: View, other: View) -> View:
    out = view.copy()
    out.merge(other)
    return out


def estimate_round(table: ActivityTable) -> int:
    """Largest known activity round; 0 for an empty table."""
    return table.estimate_round()


def candidates(view: View, k: int, window: int) -> list[int]:
    """Registered nodes active within the last ``window`` rounds, in id order."""
    return view.candidates(k, window)


def handle_joined(view: View, node: int, counter: int) -> View:
    return _handle_event(view, node, counter, EventKind.JOINED)


def handle_left(view: View, node: int, counter: int) -> View:
    return _handle_event(view, node, counter, EventKind.LEFT)


def _handle_event(view: View, node: int, counter: int, event: EventKind) -> View:
    out = view.copy()
    apply_membership_event(out, node, counter, event)
    return out


def apply_membership_event(view: View, node: int, counter: int, event: EventKind) -> None:
    """In-place receipt of a joined/left announcement.

    The activity estimate is refreshed even if the registry rejects a stale
    counter; the two steps are independent.
    """
    view.registry.update(node, counter, event)
    view.activity.update(node, view.activity.estimate_round())


@dataclass
class LocalIdentity:
    self_id: int
    persistent_counter: int = 0
    bootstrap_peers: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Announcement:
    """A joined/left message addressed to one peer."""

    to: int
    node: int
    counter: int
    event: EventKind


def request_join(identity: LocalIdentity, view: View) -> tuple[View, list[Announcement]]:
    return _request(identity, view, EventKind.JOINED)


def request_leave(identity: LocalIdentity, view: View) -> tuple[View, list[Announcement]]:
    return _request(identity, view, EventKind.LEFT)


def _request(identity: LocalIdentity, view: View, event: EventKind):
    if not identity.bootstrap_peers:
        raise ValueError("at least one bootstrap peer is required")
    identity.persistent_counter += 1
    out = view.copy()
    out.registry.update(identity.self_id, identity.persistent_counter, event)
    out.activity.update(identity.self_id, 0)
    messages = [
        Announcement(peer, identity.self_id, identity.persistent_counter, event)
        for peer in sorted(identity.bootstrap_peers)
    ]
    return out, messages


def auto_rejoin_due(last_active_times: Iterable[float], window: int, now: float) -> bool:
    """True when the node has been silent longer than ``window`` average rounds.

    The average round time is the arithmetic mean of the gaps between
    recorded activations.  Fewer than two activations never trigger.
    """
    times = list(last_active_times)
    if len(times) < 2:
        return False
    mean_gap = (times[-1] - times[0]) / (len(times) - 1)
    return now - times[-1] > window * mean_gap


def initial_view(nodes: Iterable[int], counter: int = 1) -> View:
    """View shared by a session's founding members: all joined, active at 0."""
    view = View()
    for j in nodes:
        view.registry.update(j, counter, EventKind.JOINED)
        view.activity.update(j, 0)
    return view
