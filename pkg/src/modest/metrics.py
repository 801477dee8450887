"""Per-node byte ledgers and run traces, exported as CSV and JSON."""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path


class ByteLedger:
    """Per-node incoming/outgoing bytes, split into model payload and overhead."""

    COLUMNS = ("model_in", "model_out", "overhead_in", "overhead_out")

    def __init__(self):
        self.model_in: dict[int, int] = {}
        self.model_out: dict[int, int] = {}
        self.overhead_in: dict[int, int] = {}
        self.overhead_out: dict[int, int] = {}

    def ensure(self, node: int) -> None:
        for col in (self.model_in, self.model_out, self.overhead_in, self.overhead_out):
            col.setdefault(node, 0)

    def record_send(self, src: int, model_bytes: int, overhead_bytes: int) -> None:
        self.model_out[src] += model_bytes
        self.overhead_out[src] += overhead_bytes

    def record_receive(self, dst: int, model_bytes: int, overhead_bytes: int) -> None:
        self.model_in[dst] += model_bytes
        self.overhead_in[dst] += overhead_bytes

    def record_transfer(self, kind: str, src: int, dst: int, nbytes: int) -> None:
        """Account a delivered transfer of ``kind`` ("model" or "overhead") on both ends."""
        self.ensure(src)
        self.ensure(dst)
        if kind == "model":
            self.record_send(src, nbytes, 0)
            self.record_receive(dst, nbytes, 0)
        elif kind == "overhead":
            self.record_send(src, 0, nbytes)
            self.record_receive(dst, 0, nbytes)
        else:
            raise ValueError(f"unknown transfer kind {kind!r}")

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.model_in)

    def node_total(self, node: int) -> int:
        return (self.model_in[node] + self.model_out[node]
                + self.overhead_in[node] + self.overhead_out[node])

    def node_model_total(self, node: int) -> int:
        return self.model_in[node] + self.model_out[node]

    @property
    def total(self) -> int:
        return sum(self.node_total(j) for j in self.model_in)

    @property
    def total_model(self) -> int:
        return sum(self.node_model_total(j) for j in self.model_in)

    @property
    def total_overhead(self) -> int:
        return self.total - self.total_model

    def overhead_share(self) -> float:
        total = self.total
        return self.total_overhead / total if total else 0.0

    def rows(self):
        for j in self.node_ids:
            yield (j, self.model_in[j], self.model_out[j], self.overhead_in[j], self.overhead_out[j])

    def summary(self) -> dict:
        totals = [self.node_total(j) for j in self.node_ids] or [0]
        return {
            "total_bytes": self.total,
            "model_bytes": self.total_model,
            "overhead_bytes": self.total_overhead,
            "overhead_share": self.overhead_share(),
            "min_node_bytes": min(totals),
            "max_node_bytes": max(totals),
            "mean_node_bytes": sum(totals) / len(totals),
            "max_node": self.node_ids[totals.index(max(totals))] if self.node_ids else None,
        }


@dataclass
class RoundRecord:
    round: int
    start: float
    end: float | None = None
    trainers: set = field(default_factory=set)
    completed_aggregators: int = 0
    sample_durations: list = field(default_factory=list)
    loss: float | None = None
    metric: float | None = None

    @property
    def sample_duration(self) -> float | None:
        return statistics.fmean(self.sample_durations) if self.sample_durations else None


@dataclass
class JoinRecord:
    joiner: int
    time: float
    round: int
    observers: set  # pre-existing live nodes expected to learn about the joiner
    seen: dict = field(default_factory=dict)  # observer -> (time, round)

    @property
    def completed(self) -> bool:
        return self.observers.issubset(self.seen)

    def completion(self) -> tuple[float, int] | None:
        if not self.observers or not self.completed:
            return None
        return max(self.seen[o] for o in self.observers)


class Recorder:
    """Collects everything a run reports.  Single writer, driven by the event loop."""

    def __init__(self, task=None, evaluate=None):
        self.task = task
        self._evaluate = evaluate
        self.ledger = ByteLedger()
        self.timeline: list[tuple[float, int, float]] = []
        self.rounds: dict[int, RoundRecord] = {}
        self.samples: list[tuple[float, int, int, int, float, int]] = []
        self.joins: dict[int, JoinRecord] = {}
        self.round_models: dict[int, object] = {}
        self.keep_models = False
        self.current_round = 0
        self.target_round: int | None = None
        self.target_time: float | None = None
        self.on_target = None
        self.on_round = None
        self._recorded: set[int] = set()

    # -- rounds
    def round(self, k: int, now: float) -> RoundRecord:
        rec = self.rounds.get(k)
        if rec is None:
            rec = self.rounds[k] = RoundRecord(k, now)
            prev = self.rounds.get(k - 1)
            if prev is not None and prev.end is None:
                prev.end = now
        return rec

    def record_round(self, k: int, now: float, model) -> bool:
        """Register the first aggregated model of round ``k``; returns True if it was new."""
        self.current_round = max(self.current_round, k)
        rec = self.round(k, now)
        if k in self._recorded:
            return False
        self._recorded.add(k)
        if self.keep_models:
            self.round_models[k] = model
        if self._evaluate is not None:
            rec.loss, rec.metric = self._evaluate(model)
            self.record_metric(now, k, rec.metric)
        if self.on_round is not None:
            self.on_round(k)
        return True

    def record_metric(self, now: float, k: int, metric: float) -> None:
        self.timeline.append((now, k, metric))
        if self.target_round is None and self.task is not None and self.task.reached(metric):
            self.target_round, self.target_time = k, now
            if self.on_target is not None:
                self.on_target()

    def record_sample(self, started: float, node: int, k: int, size: int, duration: float,
                      attempts: int) -> None:
        self.samples.append((started, node, k, size, duration, attempts))
        self.round(k, started).sample_durations.append(duration)

    # -- membership propagation
    def record_join(self, joiner: int, now: float, observers) -> None:
        self.joins[joiner] = JoinRecord(joiner, now, self.current_round, set(observers))

    def record_view_inclusion(self, joiner: int, observer: int, now: float) -> None:
        rec = self.joins.get(joiner)
        if rec is not None and observer not in rec.seen:
            rec.seen[observer] = (now, self.current_round)

    def drop_observer(self, node: int) -> None:
        """Crashed nodes leave every propagation denominator."""
        for rec in self.joins.values():
            if node not in rec.seen:
                rec.observers.discard(node)

    # -- export
    def summary(self, extra: dict | None = None) -> dict:
        out = dict(self.ledger.summary())
        final = self.timeline[-1] if self.timeline else None
        out.update({
            "rounds": self.current_round,
            "rounds_to_target": self.target_round,
            "time_to_target_ms": self.target_time,
            "final_metric": final[2] if final else None,
            "target": None if self.task is None else self.task.target,
        })
        if extra:
            out.update(extra)
        return out


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def export(recorder: Recorder, out_dir, extra: dict | None = None) -> dict:
    """Write timeline/bytes/rounds/propagation CSVs and summary.json; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "timeline.csv", ("time_ms", "round", "metric"), sorted(recorder.timeline))
    _write_csv(out / "bytes.csv", ("node",) + ByteLedger.COLUMNS, recorder.ledger.rows())
    _write_csv(
        out / "rounds.csv",
        ("round", "start_ms", "end_ms", "sample_ms", "completed_aggregators", "trainers", "loss",
         "metric"),
        ((r.round, r.start, r.end, r.sample_duration, r.completed_aggregators,
          " ".join(map(str, sorted(r.trainers))), r.loss, r.metric)
         for r in sorted(recorder.rounds.values(), key=lambda r: r.round)),
    )
    prop_rows = []
    for rec in recorder.joins.values():
        for obs, (t, k) in rec.seen.items():
            prop_rows.append((t, rec.joiner, obs, rec.time, k - rec.round))
    _write_csv(out / "propagation.csv",
               ("time_ms", "joiner", "observer", "join_time_ms", "rounds_after_join"),
               sorted(prop_rows))
    summary = _json_safe(recorder.summary(extra))
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
