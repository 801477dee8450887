from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modest.simnet import (
    ComputeTimeModel,
    FaultAction,
    FaultSchedule,
    LatencyModel,
    SimulationStalled,
    Simulator,
    staggered,
)


@dataclass(frozen=True)
class Msg:
    kind: str = "test"
    model_bytes: int = 0
    overhead_bytes: int = 10


class Recorder:
    def __init__(self, node_id, sim):
        self.node_id = node_id
        self.sim = sim
        self.log = []

    def on_message(self, src, msg):
        self.log.append(("msg", self.sim.now, src, msg))

    def on_timer(self, tag):
        self.log.append(("timer", self.sim.now, tag))

    def on_compute_done(self, handle):
        self.log.append(("compute", self.sim.now, handle.payload))


def two_nodes(delay=100.0):
    lat = LatencyModel([[0, delay], [delay, 0]])
    sim = Simulator(lat)
    a, b = Recorder(0, sim), Recorder(1, sim)
    sim.add_node(a)
    sim.add_node(b)
    return sim, a, b


def test_delivery_after_latency():
    sim, a, b = two_nodes()
    sim.call_at(50.0, lambda: sim.send(0, 1, Msg()))
    sim.run()
    assert b.log == [("msg", 150.0, 0, Msg())]


def test_self_send_uses_diagonal():
    sim, a, _ = two_nodes()
    sim.call_at(5.0, lambda: sim.send(0, 0, Msg()))
    sim.run()
    assert a.log[0][:2] == ("msg", 5.0)


def test_crashed_recipient_drops_and_counts_sender_only():
    sim, a, b = two_nodes()
    sim.crash(1)
    sim.send(0, 1, Msg(model_bytes=100, overhead_bytes=5))
    sim.run()
    assert b.log == []
    assert sim.ledger.model_out[0] == 100 and sim.ledger.overhead_out[0] == 5
    assert sim.ledger.model_in[1] == 0
    assert sim.transfers[0].delivered is False


def test_down_sender_sends_nothing():
    sim, a, b = two_nodes()
    sim.crash(0)
    sim.send(0, 1, Msg())
    sim.run()
    assert not sim.transfers and b.log == []


def test_timer_fires_once_and_cancel_suppresses():
    sim, a, _ = two_nodes()
    sim.set_timer(0, 10.0, "x")
    sim.set_timer(0, 20.0, "y")
    sim.cancel_timer(0, "y")
    sim.run()
    assert a.log == [("timer", 10.0, "x")]
    with pytest.raises(ValueError):
        sim.set_timer(0, 0.0, "z")


def test_resetting_a_timer_replaces_it():
    sim, a, _ = two_nodes()
    sim.set_timer(0, 10.0, "x")
    sim.set_timer(0, 30.0, "x")
    sim.run()
    assert a.log == [("timer", 30.0, "x")]


def test_same_time_events_run_in_schedule_order():
    sim, a, _ = two_nodes()
    for tag in "abc":
        sim.set_timer(0, 5.0, tag)
    sim.run()
    assert [e[2] for e in a.log] == ["a", "b", "c"]


def test_compute_completion_and_crash_abort():
    sim, a, b = two_nodes()
    sim.schedule_compute(0, 40.0, "p")
    sim.schedule_compute(1, 40.0, "q")
    sim.call_at(10.0, lambda: sim.crash(1))
    sim.call_at(20.0, lambda: sim.recover(1))
    sim.run()
    assert a.log == [("compute", 40.0, "p")]
    assert b.log == []


def test_cancelled_compute_does_not_complete():
    sim, a, _ = two_nodes()
    h = sim.schedule_compute(0, 40.0, "p")
    h.cancel()
    sim.run()
    assert a.log == []


def test_timers_void_after_crash():
    sim, a, _ = two_nodes()
    sim.set_timer(0, 30.0, "x")
    sim.call_at(10.0, lambda: sim.crash(0))
    sim.call_at(20.0, lambda: sim.recover(0))
    sim.run()
    assert a.log == []


def test_empty_run_is_quiescent():
    sim, _, _ = two_nodes()
    res = sim.run()
    assert res.status == "quiescent" and res.events == 0


def test_horizon():
    sim, a, _ = two_nodes()
    sim.set_timer(0, 10.0, "x")
    sim.set_timer(0, 100.0, "y")
    res = sim.run(until=50.0)
    assert res.status == "horizon" and sim.now == 50.0
    assert len(a.log) == 1


def test_stall_when_progress_stops():
    sim, _, _ = two_nodes()
    sim.stall_window = 100.0
    sim.note_progress(1)
    for t in (50.0, 120.0, 300.0):
        sim.call_at(t, lambda: None)
    with pytest.raises(SimulationStalled) as exc:
        sim.run()
    assert exc.value.report["last_round"] == 1
    assert exc.value.report["time_ms"] == 100.0


def test_quiescence_after_progress_is_a_stall():
    sim, _, _ = two_nodes()
    sim.note_progress(3)
    sim.crash(0)
    sim.crash(1)
    with pytest.raises(SimulationStalled) as exc:
        sim.run()
    assert exc.value.report["live_nodes"] == 0


def _pingpong(seed):
    lat = LatencyModel.uniform(4, 5.0, 50.0, seed=seed)
    sim = Simulator(lat, record_events=True)

    class Bouncer(Recorder):
        def on_message(self, src, msg):
            super().on_message(src, msg)
            if len(self.log) < 20:
                self.sim.send(self.node_id, (self.node_id + src + 1) % 4, Msg())

    for j in range(4):
        sim.add_node(Bouncer(j, sim))
    sim.send(0, 1, Msg())
    sim.send(2, 3, Msg())
    return sim.run()


def test_same_seed_same_event_digest():
    assert _pingpong(3).digest == _pingpong(3).digest
    assert _pingpong(3).digest != _pingpong(4).digest


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 500),
                          st.booleans(), st.floats(0, 200)), max_size=30))
def test_byte_conservation(sends):
    lat = LatencyModel.uniform(4, 1.0, 30.0, seed=0)
    sim = Simulator(lat)
    for j in range(4):
        sim.add_node(Recorder(j, sim))
    for src, dst, nbytes, crash_dst, t in sends:
        def go(src=src, dst=dst, nbytes=nbytes, crash_dst=crash_dst):
            if crash_dst and dst != src:
                sim.crash(dst)
            else:
                sim.recover(dst)
            sim.send(src, dst, Msg(model_bytes=nbytes, overhead_bytes=1))
        sim.call_at(t, go)
    sim.run()
    delivered = sum(r.model_bytes + r.overhead_bytes for r in sim.transfers if r.delivered)
    dropped = sum(r.model_bytes + r.overhead_bytes for r in sim.transfers if not r.delivered)
    assert sim.ledger.total == 2 * delivered + dropped


def test_latency_models(tmp_path):
    path = tmp_path / "rtt.csv"
    path.write_text("0,20,40\n20,0,60\n40,60,0\n")
    lat = LatencyModel.from_csv(path)
    assert lat.delay(0, 2) == 20.0
    assert lat.delay(4, 2) == 30.0  # node 4 sits at site 1
    assert lat.delay(1, 1) == 0.0
    assert LatencyModel.from_csv(path, rtt=False).delay(0, 2) == 40.0
    u = LatencyModel.uniform(6, 10, 20, seed=1)
    assert np.allclose(u.matrix, u.matrix.T)
    assert all(10 <= u.delay(i, j) <= 20 for i in range(6) for j in range(6) if i != j)
    g = LatencyModel.geographic(10, seed=2)
    assert np.all(g.matrix > 0)
    with pytest.raises(ValueError):
        LatencyModel([[0, -1], [1, 0]])
    with pytest.raises(ValueError):
        LatencyModel([[0, 1]])


def test_compute_time_model():
    c = ComputeTimeModel(100.0)
    assert c.duration(3, 7) == 100.0
    ln = ComputeTimeModel(100.0, sigma=0.5, seed=1)
    assert ln.duration(3, 7) == ln.duration(3, 7)
    assert ln.duration(3, 7) != ln.duration(3, 8)
    spread = ComputeTimeModel(100.0, node_spread=0.5, seed=1)
    assert spread.duration(1, 1) == spread.duration(1, 2) != spread.duration(2, 1)
    with pytest.raises(ValueError):
        ComputeTimeModel(0.0)


def test_fault_schedules():
    fs = FaultSchedule.from_entries([{"time_ms": 1, "action": "crash", "node": 2},
                                     {"time_ms": 1, "action": "crash", "node": 3},
                                     {"time_ms": 5, "action": "join", "node": 9}])
    assert fs.max_concurrent() == 2
    assert fs.nodes("join") == [9]
    with pytest.raises(ValueError):
        FaultSchedule([FaultAction(5, "crash", 1), FaultAction(1, "crash", 2)])
    with pytest.raises(ValueError):
        FaultAction(1, "explode", 1)
    st_ = staggered("crash", [4, 5, 6], 100.0, 10.0)
    assert [a.time for a in st_] == [100.0, 110.0, 120.0]
    assert st_.max_concurrent() == 1


def test_faults_reference_known_nodes():
    sim, _, _ = two_nodes()
    with pytest.raises(ValueError):
        sim.schedule_faults([FaultAction(1.0, "crash", 7)])
