"""Declarative scenarios: config parsing/validation and one-call execution.

A scenario names a method (``modest``, ``fedavg`` or ``dsgd``), the network
(latency and compute models), the learning task, an optional fault schedule
and the stopping rule.  Every random choice derives from ``seed`` unless a
sub-section overrides it.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .baselines import DsgdDriver, FedAvgClient, FedAvgServer, client_schedule, pick_server
from .learning import PartitionSpec, TrainerConfig, evaluate, make_task
from .membership import initial_view
from .metrics import Recorder, export
from .protocol import ModestNode, ProtocolConfig, first_sample
from .simnet import ComputeTimeModel, FaultSchedule, LatencyModel, SimulationStalled, Simulator, staggered

METHODS = ("modest", "fedavg", "dsgd")


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    method: str = "modest"
    n: int = 32
    s: int = 4
    a: int | None = None  # default: z + 1
    sf: float | None = None  # default: 1, or (s - z) / s with z concurrent crashes
    timeout_ms: float | None = None  # Δt, default: 2 x max pairwise round-trip time
    window: int | None = None  # Δk, default: 2 * ceil(n / s)
    fixed_aggregator: bool = False
    auto_rejoin: bool = True
    client_schedule: str = "hash"
    task: dict = field(default_factory=lambda: {"name": "linreg", "dim": 10, "samples_per_node": 20,
                                                "noise": 0.5})
    partition: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    latency: dict = field(default_factory=lambda: {"kind": "geographic"})
    compute: dict = field(default_factory=dict)
    faults: list = field(default_factory=list)
    seed: int = 0
    horizon_ms: float | None = None
    max_rounds: int | None = 100
    stop_at_target: bool = True
    target: float | None = None
    stall_window_ms: float | None = None
    keep_models: bool = False

    # -- construction
    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("scenario config must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        """Read a YAML (or JSON, which YAML parses) scenario file."""
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def replace(self, **changes) -> "ScenarioConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- derived values
    def fault_schedule(self) -> FaultSchedule:
        actions = []
        for entry in self.faults:
            if "staggered" in entry:
                actions.extend(staggered(entry["staggered"], entry["nodes"],
                                         float(entry.get("start_ms", 0.0)),
                                         float(entry.get("interval_ms", 0.0))))
            else:
                actions.extend(FaultSchedule.from_entries([entry]))
        return FaultSchedule(sorted(actions, key=lambda x: x.time))

    @property
    def concurrent_crashes(self) -> int:
        return self.fault_schedule().max_concurrent("crash")

    @property
    def has_crashes(self) -> bool:
        return any(f.action in ("crash", "leave") for f in self.fault_schedule())

    @property
    def effective_a(self) -> int:
        if self.a is not None:
            return self.a
        return 1 if self.fixed_aggregator else self.concurrent_crashes + 1

    @property
    def effective_sf(self) -> float:
        if self.sf is not None:
            return self.sf
        if not self.has_crashes:
            return 1.0
        return (self.s - self.concurrent_crashes) / self.s

    @property
    def effective_window(self) -> int:
        return self.window if self.window is not None else 2 * math.ceil(self.n / self.s)

    @property
    def joiners(self) -> list[int]:
        return sorted({f.node for f in self.fault_schedule() if f.action == "join"} - set(range(self.n)))

    @property
    def all_nodes(self) -> list[int]:
        return list(range(self.n)) + self.joiners

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if not 1 <= self.s <= self.n:
            raise ConfigError(f"sample size must satisfy 1 <= s <= n (s={self.s}, n={self.n})")
        if self.a is not None and not 1 <= self.a <= self.s:
            raise ConfigError(f"aggregator count must satisfy 1 <= a <= s (a={self.a}, s={self.s})")
        if self.sf is not None and not 0.5 < self.sf <= 1:
            raise ConfigError(f"success fraction must satisfy 0.5 < sf <= 1 (sf={self.sf})")
        if self.timeout_ms is not None and self.timeout_ms <= 0:
            raise ConfigError("timeout_ms (Δt) must be positive")
        if self.window is not None and self.window < 1:
            raise ConfigError("window (Δk) must be >= 1")
        if self.client_schedule not in ("hash", "random"):
            raise ConfigError("client_schedule must be 'hash' or 'random'")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        try:
            schedule = self.fault_schedule()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid fault schedule: {exc}") from exc
        for f in schedule:
            if f.action != "join" and not 0 <= f.node < self.n + len(self.joiners):
                raise ConfigError(f"fault references unknown node {f.node}")
        if self.fixed_aggregator and self.a not in (None, 1):
            raise ConfigError("a fixed aggregator requires a = 1")
        if self.method != "modest" and schedule:
            raise ConfigError("fault schedules are only supported for method 'modest'")
        a, sf = self.effective_a, self.effective_sf
        if not 1 <= a <= self.s:
            raise ConfigError(f"derived a = z + 1 = {a} exceeds s = {self.s}; set a explicitly")
        if not 0.5 < sf <= 1:
            raise ConfigError(f"success fraction must satisfy 0.5 < sf <= 1; derived sf = (s - z) / s "
                              f"= {sf:.3f} with z = {self.concurrent_crashes} concurrent crashes")
        if self.horizon_ms is None and self.max_rounds is None and not self.stop_at_target:
            raise ConfigError("scenario has no stopping rule (horizon_ms, max_rounds or stop_at_target)")
        if not isinstance(self.task, dict) or "name" not in self.task:
            raise ConfigError("task must be a mapping with a 'name'")

    # -- builders
    def build_latency(self) -> LatencyModel:
        spec = dict(self.latency)
        kind = spec.pop("kind", "geographic")
        spec.setdefault("seed", self.seed)
        try:
            if kind == "geographic":
                spec.setdefault("n_sites", len(self.all_nodes))
                return LatencyModel.geographic(**spec)
            if kind == "uniform":
                spec.setdefault("n_nodes", len(self.all_nodes))
                return LatencyModel.uniform(**spec)
            if kind == "csv":
                spec.pop("seed")
                return LatencyModel.from_csv(**spec)
        except (TypeError, ValueError, OSError) as exc:
            raise ConfigError(f"invalid latency model: {exc}") from exc
        raise ConfigError(f"unknown latency kind {kind!r}")

    def build_compute(self) -> ComputeTimeModel:
        spec = dict(self.compute)
        spec.setdefault("seed", self.seed)
        try:
            return ComputeTimeModel(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid compute model: {exc}") from exc

    def build_task(self):
        spec = dict(self.task)
        name = spec.pop("name")
        spec.setdefault("seed", self.seed)
        spec["n_nodes"] = len(self.all_nodes)
        part = dict(self.partition)
        part.setdefault("seed", spec["seed"])
        try:
            return make_task(name, partition=PartitionSpec(**part), **spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid task: {exc}") from exc

    def build_trainer_config(self) -> TrainerConfig:
        spec = dict(self.trainer)
        spec.setdefault("seed", self.seed)
        try:
            return TrainerConfig(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid trainer config: {exc}") from exc


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    status: str  # "target" | "max_rounds" | "horizon" | "quiescent" | "stalled"
    recorder: Recorder
    sim: Simulator
    task: Any
    timeout_ms: float
    window: int
    stall_report: dict | None = None
    server: int | None = None
    actors: dict = field(default_factory=dict)
    driver: Any = None

    @property
    def stalled(self) -> bool:
        return self.status == "stalled"

    def extra(self) -> dict:
        cfg = self.config
        out = {
            "method": cfg.method,
            "status": self.status,
            "n": cfg.n,
            "s": cfg.s,
            "a": cfg.effective_a,
            "sf": cfg.effective_sf,
            "timeout_ms": self.timeout_ms,
            "window": self.window,
            "seed": cfg.seed,
            "virtual_time_ms": self.sim.now,
            "event_digest": self.sim.digest,
            "model_transfers": sum(1 for t in self.sim.transfers if t.model_bytes),
        }
        if self.server is not None:
            out["server"] = self.server
            total = self.recorder.ledger.total
            out["server_share"] = self.recorder.ledger.node_total(self.server) / total if total else 0.0
        if self.driver is not None and self.driver.history:
            out["final_metric_std"] = self.driver.history[-1][1]
        if self.stall_report is not None:
            out["stall"] = self.stall_report
        return out

    def summary(self) -> dict:
        return self.recorder.summary(self.extra())

    def export(self, out_dir) -> dict:
        return export(self.recorder, out_dir, self.extra())

    def round_models(self) -> dict:
        return self.recorder.round_models

    def model_transfers_by_round(self) -> dict[int, int]:
        """Model transfers grouped by the round of the model they carry toward.

        Round ``r`` owns the ``aggregate`` messages addressed to round ``r``
        and the ``train`` messages of round ``r``.  D-SGD gossip of round ``r``
        belongs to round ``r``.
        """
        out: dict[int, int] = {}
        for t in self.sim.transfers:
            if t.model_bytes:
                out[t.round] = out.get(t.round, 0) + 1
        return out


def default_timeout(latency: LatencyModel, nodes) -> float:
    """Δt = 2 x the largest round-trip time between any two nodes."""
    return 2 * 2 * latency.max_delay(nodes)


def default_stall_window(timeout: float, compute: ComputeTimeModel) -> float:
    """10 x Δt plus room for a slow training step, so long compute phases are not stalls."""
    return 10 * timeout + 2 * compute.quantile(0.999)


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    cfg.validate()
    latency = cfg.build_latency()
    compute = cfg.build_compute()
    task = cfg.build_task()
    if cfg.target is not None:
        task.target = cfg.target
    trainer = task.make_trainer(cfg.build_trainer_config())
    nodes = list(range(cfg.n))
    timeout = cfg.timeout_ms if cfg.timeout_ms is not None else default_timeout(latency, cfg.all_nodes)
    window = cfg.effective_window
    stall = cfg.stall_window_ms if cfg.stall_window_ms is not None else default_stall_window(timeout, compute)

    recorder = Recorder(task, lambda m: evaluate(m, task.test, task))
    recorder.keep_models = cfg.keep_models
    sim = Simulator(latency, stall_window=stall, ledger=recorder.ledger)
    init = task.initial_model(cfg.seed)
    result = ScenarioResult(cfg, "running", recorder, sim, task, timeout, window)

    def finish(status):
        def cb(*_):
            if result.status == "running":
                result.status = status
            sim.stop()
        return cb

    if cfg.stop_at_target:
        recorder.on_target = finish("target")
    if cfg.max_rounds is not None:
        limit = cfg.max_rounds + 1  # round r's model is produced once round r - 1 has trained

        def on_round(k):
            if k >= limit:
                finish("max_rounds")()

        recorder.on_round = on_round

    recorder.record_round(1, 0.0, init)

    if cfg.method == "modest":
        _setup_modest(cfg, result, trainer, compute, latency, init)
    elif cfg.method == "fedavg":
        server = pick_server(latency, nodes)
        clients = [j for j in nodes if j != server]
        result.server = server
        srv = FedAvgServer(server, sim, client_schedule(clients, cfg.s, cfg.client_schedule, cfg.seed),
                           recorder)
        sim.add_node(srv)
        for j in clients:
            sim.add_node(FedAvgClient(j, sim, trainer, compute))
        result.actors = {server: srv}
        sim.call_at(0.0, lambda: srv.start(init))
    else:
        driver = DsgdDriver(sim, nodes, trainer, compute, recorder,
                            evaluate_fn=lambda m: evaluate(m, task.test, task), max_rounds=None)
        for node in driver.nodes:
            sim.add_node(node)
        result.driver = driver
        if cfg.max_rounds is not None:
            driver.max_rounds = cfg.max_rounds

            def stop_rounds(k, limit=cfg.max_rounds + 1):
                if k >= limit:
                    finish("max_rounds")()

            _chain_progress(driver, stop_rounds)
        sim.call_at(0.0, lambda: driver.start(init))

    try:
        run = sim.run(until=cfg.horizon_ms)
        if result.status == "running":
            result.status = run.status
    except SimulationStalled as exc:
        result.status = "stalled"
        result.stall_report = exc.report
    return result


def _chain_progress(driver: DsgdDriver, callback) -> None:
    original = driver._record

    def record(k):
        original(k)
        callback(k)

    driver._record = record


def _setup_modest(cfg: ScenarioConfig, result: ScenarioResult, trainer, compute, latency, init) -> None:
    sim, recorder = result.sim, result.recorder
    nodes = list(range(cfg.n))
    fixed = pick_server(latency, nodes) if cfg.fixed_aggregator else None
    result.server = fixed
    pconf = ProtocolConfig(cfg.s, cfg.effective_a, cfg.effective_sf, result.timeout_ms, result.window,
                           fixed_aggregator=fixed, auto_rejoin=cfg.auto_rejoin)
    view = initial_view(nodes)
    actors = {}
    for j in nodes:
        actors[j] = ModestNode(j, sim, pconf, trainer, compute, view=view.copy(), recorder=recorder,
                               counter=1, seed=cfg.seed)
        sim.add_node(actors[j])
    rng = np.random.default_rng([cfg.seed, 0x10111])
    for j in cfg.joiners:
        actors[j] = ModestNode(j, sim, pconf, trainer, compute, recorder=recorder, seed=cfg.seed)
        peers = rng.choice(nodes, size=min(cfg.s, len(nodes)), replace=False)
        actors[j].identity.bootstrap_peers = frozenset(int(p) for p in peers)
        sim.add_node(actors[j], up=False)
    result.actors = actors

    def on_fault(action):
        if action.action in ("crash", "leave"):
            recorder.drop_observer(action.node)
        elif action.action == "join":
            observers = sorted(j for j in sim.up if j != action.node)
            recorder.record_join(action.node, sim.now, observers)
            for o in observers:
                if actors[o].view.registry.is_registered(action.node):
                    recorder.record_view_inclusion(action.node, o, sim.now)

    sim.fault_listeners.append(on_fault)
    sim.schedule_faults(cfg.fault_schedule())
    for j in first_sample(nodes, cfg.s, fixed):
        sim.call_at(0.0, lambda j=j: actors[j].bootstrap(init))


def load_config(path, seed: int | None = None) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path)
    return cfg.replace(seed=seed) if seed is not None else cfg


def write_yaml(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
