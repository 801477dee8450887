"""Wire messages exchanged by simulated nodes, with their accounted sizes.

Nothing is serialized; each message only reports how many bytes it would
occupy, split into model payload and protocol overhead.
"""
from __future__ import annotations

from dataclasses import dataclass

from .learning.model import Model
from .membership import View

HEADER_BYTES = 32
CONTROL_BYTES = 64


@dataclass(frozen=True)
class Ping:
    k: int
    sender: int
    overhead_bytes: int = CONTROL_BYTES
    kind = "ping"


@dataclass(frozen=True)
class Pong:
    k: int
    sender: int
    overhead_bytes: int = CONTROL_BYTES
    kind = "pong"


@dataclass(frozen=True)
class Joined:
    node: int
    counter: int
    overhead_bytes: int = CONTROL_BYTES
    kind = "joined"


@dataclass(frozen=True)
class Left:
    node: int
    counter: int
    overhead_bytes: int = CONTROL_BYTES
    kind = "left"


@dataclass(frozen=True)
class ViewSnapshot:
    """A frozen copy of a node's view, shared by every message of one broadcast."""

    view: View
    wire_bytes: int

    @classmethod
    def of(cls, view: View) -> "ViewSnapshot":
        snap = view.copy()
        return cls(snap, snap.wire_size())


@dataclass(frozen=True)
class _ModelMessage:
    k: int
    model: Model
    snapshot: ViewSnapshot | None
    sender: int
    header_bytes: int = HEADER_BYTES

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("round numbers in model messages start at 1")

    @property
    def view(self) -> View | None:
        return None if self.snapshot is None else self.snapshot.view

    @property
    def model_bytes(self) -> int:
        return self.model.byte_size

    @property
    def overhead_bytes(self) -> int:
        view_bytes = 0 if self.snapshot is None else self.snapshot.wire_bytes
        return view_bytes + self.header_bytes


@dataclass(frozen=True)
class Train(_ModelMessage):
    """Aggregated model pushed to a trainer of round ``k``."""

    kind = "train"


@dataclass(frozen=True)
class Aggregate(_ModelMessage):
    """Locally trained model pushed to an aggregator of round ``k``."""

    kind = "aggregate"


MODEL_KINDS = ("train", "aggregate", "gossip")


@dataclass(frozen=True)
class Gossip(_ModelMessage):
    """Model sent to the current exponential-graph peer in decentralized SGD."""

    kind = "gossip"
