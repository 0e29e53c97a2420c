import threading

import pytest

from detrace.anchor import AnchorConfig, AnchorHandle, ReplayFail
from detrace.checker import explore
from detrace.election import ElectionModel
from detrace.example import (
    ElectionNode,
    MessageBus,
    SuiteSetupError,
    run_election,
    run_suite,
    run_trace,
)
from detrace.example.node import NodeStopped
from detrace.example.suite import node_count_of
from detrace.graphfile import write_graph
from detrace.model import Trace
from detrace.tracegen import TraceSet, enumerate_traces, write_traces


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    g, _ = explore(ElectionModel(2, 1))
    write_graph(g, d / "g.jsonl")
    ts = enumerate_traces(g)
    write_traces(ts, d / "t.jsonl")
    return d / "g.jsonl", d / "t.jsonl", g, ts


def disabled_nodes(n=2):
    bus = MessageBus(range(1, n + 1))
    return bus, [ElectionNode(i, n, bus, AnchorHandle(AnchorConfig(node=i))) for i in range(1, n + 1)]


class TestNode:
    def test_direct_election(self):
        bus, (n1, n2) = disabled_nodes()
        n1.timeout()
        n1.request_vote(2)
        n2.handle(bus.recv(2, 1.0))
        n1.handle(bus.recv(1, 1.0))
        n1.become_leader()
        assert n1.role == "leader" and n2.voted_for == 1
        assert n1.observed() == {"term_1": 1, "voted_for_1": 1, "role_1": "leader"}

    def test_bus_take_timeout(self):
        bus = MessageBus([1])
        with pytest.raises(TimeoutError):
            bus.take(1, lambda m: True, timeout=0.05)

    def test_bus_stop_wakes_taker(self):
        bus = MessageBus([1])
        got = []

        def taker():
            try:
                bus.take(1, lambda m: True)
            except NodeStopped:
                got.append("stopped")

        t = threading.Thread(target=taker)
        t.start()
        bus.stop()
        t.join(2)
        assert got == ["stopped"]

    def test_node_count_of(self, small):
        g = small[2]
        assert node_count_of(g.states[g.initial[0]]) == 2


class TestReplay:
    def test_correct_suite_passes(self, small):
        graph, traces, _, ts = small
        rep = run_suite(graph, traces)
        assert rep.passed and len(rep.reports) == len(ts) == 62

    def test_buggy_implementation_fails(self, small):
        graph, traces, _, _ = small
        rep = run_suite(graph, traces, buggy=True, fail_fast=True, step_timeout_ms=1000)
        first = rep.first_failure
        assert not rep.passed and first.reason in ("state_mismatch", "timeout")
        assert first.failed_step is not None and first.expected_action is not None

    def test_empty_trace(self, small):
        g = small[2]
        init = g.states[g.initial[0]]
        assert run_trace(Trace(init), 2).passed

    def test_limit_and_progress(self, small):
        seen = []
        rep = run_suite(small[0], small[1], limit=3, progress=seen.append)
        assert len(rep.reports) == 3 and seen == rep.reports
        assert "3/3 traces passed" in rep.summary()

    def test_digest_mismatch(self, small, tmp_path):
        g, _ = explore(ElectionModel(2, 2))
        write_graph(g, tmp_path / "other.jsonl")
        with pytest.raises(SuiteSetupError):
            run_suite(tmp_path / "other.jsonl", small[1])

    def test_empty_trace_set(self, small, tmp_path):
        write_traces(TraceSet(small[3].graph_digest, []), tmp_path / "none.jsonl")
        rep = run_suite(small[0], tmp_path / "none.jsonl")
        assert rep.passed and rep.reports == []

    def test_missing_file(self, small, tmp_path):
        with pytest.raises((SuiteSetupError, OSError)):
            run_suite(tmp_path / "nope.jsonl", small[1])


class TestFree:
    def test_election_without_player(self, monkeypatch):
        monkeypatch.setenv("DETRACE_ENABLED", "0")
        nodes = run_election(3, seed=1, timeout_s=10)
        assert any(n.role == "leader" for n in nodes)
        assert sum(n.anchors.frames_sent for n in nodes) == 0

    def test_enabled_without_player_refuses(self, monkeypatch):
        monkeypatch.setenv("DETRACE_ENABLED", "1")
        monkeypatch.setenv("DETRACE_PLAYER_ADDR", "127.0.0.1:1")
        with pytest.raises(Exception) as ei:
            run_election(2, seed=1, timeout_s=1)
        assert not isinstance(ei.value, ReplayFail)
