"""End-to-end acceptance criteria, one test each.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line; the lines
are also collected into the terminal summary so they show without ``-s``.
"""

import filecmp
import itertools
import random
import re
import subprocess
import sys
import threading
import time

import pytest
from click.testing import CliRunner
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as hst

from detrace.anchor import AnchorConfig, ReplayFail, anchor_init
from detrace.canon import canon_decode, canon_encode
from detrace.checker import explore
from detrace.cli import main
from detrace.election import ElectionModel, at_most_one_leader_per_term, inject_bug
from detrace.example import run_election, run_suite
from detrace.graphfile import write_graph
from detrace.model import State, state_hash
from detrace.player import Coordinator, Player, RunReport
from detrace.tracegen import TraceGenLimits, TraceSet, enumerate_traces, write_traces
from detrace.wire import ActionReq, Hello, encode_frame

from conftest import act, dag_graph, make_trace, out
from oracles import canon_bytes, maximal_paths, random_dag

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []


class verdict:
    """Context manager printing the criterion's pass/fail line."""

    def __init__(self, n: int, what: str):
        self.n, self.what = n, what
        self.start = time.monotonic()
        self.note = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        took = time.monotonic() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        line = f"[criterion {self.n}] {status} {self.what} ({took:.1f} s){self.note}"
        if exc is not None:
            line += f": {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        RESULTS.append(line)
        print(line)
        return False


# -- 1 ---------------------------------------------------------------------

canon_values = hst.recursive(
    hst.none()
    | hst.booleans()
    | hst.integers(min_value=-(2**63), max_value=2**63 - 1)
    | hst.text(max_size=12),
    lambda kids: hst.lists(kids, max_size=5) | hst.dictionaries(hst.text(max_size=6), kids, max_size=5),
    max_leaves=20,
)

ROUND_TRIPS = 0


@settings(max_examples=1200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(canon_values)
def _round_trip(v):
    global ROUND_TRIPS
    ROUND_TRIPS += 1
    data = canon_encode(v)
    assert canon_decode(data) == v
    assert canon_encode(canon_decode(data)) == data
    assert data == canon_bytes(v)


def test_criterion_1_canonical_encoding():
    with verdict(1, "canonical encoding round-trip and golden bytes") as v:
        _round_trip()
        assert ROUND_TRIPS >= 1000, ROUND_TRIPS
        assert canon_encode({"z": 1, "a": [True, None, "é"]}) == b'{"a":[true,null,"\xc3\xa9"],"z":1}'
        assert encode_frame(Hello(1)) == b'\x00\x00\x00\x2b{"node":1,"proto_version":1,"type":"hello"}'
        assert state_hash(State({"x": 1, "y": [1, 2], "z": None})) == 5868489927384156138
        assert canon_encode(-(2**63)) == b"-9223372036854775808"
        v.note = f", {ROUND_TRIPS} random cases"


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_trace_enumeration_oracle():
    with verdict(2, "trace enumeration equals brute-force maximal paths") as v:
        rng = random.Random(1789)
        total = 0
        for _ in range(120):
            n, roots, edges = random_dag(rng, 12, 20)
            ts = enumerate_traces(dag_graph(n, roots, edges))
            got = sorted((t.initial_state["v"], tuple(a.name for a in t.actions)) for t in ts.traces)
            assert got == sorted(maximal_paths(n, roots, edges))
            total += len(got)
        assert time.monotonic() - v.start < 10
        v.note = f", 120 DAGs, {total} paths"


# -- 3 ---------------------------------------------------------------------


def _handoff() -> list:
    pi1, pi2 = act("Pi1", 1), act("Pi2", 2)
    with Player(make_trace(pi1, pi2)).start() as p:
        h1 = anchor_init(AnchorConfig(True, p.addr_str, 1))
        h2 = anchor_init(AnchorConfig(True, p.addr_str, 2))
        unblocked = []

        def client2():
            h2.begin_internal("Pi2")
            unblocked.append(2)
            h2.end_internal("Pi2")

        t = threading.Thread(target=client2)
        t.start()
        # pi2 strictly first: wait until the player holds it
        deadline = time.monotonic() + 5
        while not p.coordinator.parked() and time.monotonic() < deadline:
            time.sleep(0.005)
        assert p.coordinator.parked(), "pi2 never reached the player"
        h1.begin_internal("Pi1")
        unblocked.append(1)
        h1.end_internal("Pi1")
        t.join(5)
        assert not t.is_alive() and unblocked == [1, 2]
        assert p.wait(5).passed
        log = p.grant_log()
        h1.close()
        h2.close()
    return log


def test_criterion_3_reorder_enforcement():
    with verdict(3, "player reorders requests into trace order") as v:
        pi1, pi2 = act("Pi1", 1), act("Pi2", 2)
        assert _handoff() == [pi1, pi2]
        actions = [out("Step", i % 3 + 1, i) for i in range(5)]
        for perm in itertools.permutations(range(5)):
            c = Coordinator(make_trace(*actions))
            replies = []
            for i in perm:
                a = actions[i]
                c.submit(ActionReq("atomic", "output", a.name, a.node, a.payload), replies.append)
            assert c.grant_log() == actions and len(replies) == 5
        # the same over sockets for a sample of orders
        rng = random.Random(3)
        for _ in range(10):
            perm = list(range(5))
            rng.shuffle(perm)
            with Player(make_trace(*actions)).start() as p:
                hs = {n: anchor_init(AnchorConfig(True, p.addr_str, n)) for n in (1, 2, 3)}
                threads = []
                for i in perm:
                    a = actions[i]
                    t = threading.Thread(target=hs[a.node].output, args=(a.name, a.payload))
                    t.start()
                    threads.append(t)
                    time.sleep(0.002)
                for t in threads:
                    t.join(5)
                assert p.wait(5).passed and p.grant_log() == actions
                for h in hs.values():
                    h.close()
        assert time.monotonic() - v.start < 30


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_timeout_inconsistency(tmp_path):
    with verdict(4, "absent action fails with timeout and player exits 1") as v:
        expected = out("RequestVote", 1, {"to": 2})
        traces = tmp_path / "t.jsonl"
        write_traces(TraceSet(0, [make_trace(expected)]), traces)
        timeout_ms = 1000
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "detrace", "player",
                "--traces", str(traces), "--listen", "127.0.0.1:0",
                "--timeout-ms", str(timeout_ms), "--report", str(tmp_path / "r.json"),
            ],
            stdout=subprocess.PIPE,
            text=True,
        )
        try:
            addr = re.search(r"listening on (\S+)", proc.stdout.readline()).group(1)
            h = anchor_init(AnchorConfig(True, addr, 3))
            sent = time.monotonic()
            with pytest.raises(ReplayFail) as ei:
                h.output("Bogus", {"x": 1})
            h.close()
            code = proc.wait(timeout_ms / 1000 + 2)
            took = time.monotonic() - sent
        finally:
            proc.kill()
        assert ei.value.reason == "timeout"
        assert ei.value.expected_action == expected
        assert code == 1 and took <= timeout_ms / 1000 + 2
        rep = RunReport.read(tmp_path / "r.json")
        assert rep.reason == "timeout" and rep.expected_action == expected
        v.note = f", exit 1 after {took:.2f} s"


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_end_to_end_refinement(tmp_path):
    with verdict(5, "every (3,1) trace replays against the implementation") as v:
        graph, violations = explore(ElectionModel(node_count=3, max_term=1))
        assert violations == []
        write_graph(graph, tmp_path / "g.jsonl")
        ts = enumerate_traces(graph, TraceGenLimits(max_traces=10_000))
        write_traces(ts, tmp_path / "t.jsonl")
        suite = run_suite(tmp_path / "g.jsonl", tmp_path / "t.jsonl")
        assert len(suite.reports) == len(ts) > 0
        assert suite.passed, suite.summary()
        assert time.monotonic() - v.start < 300
        v.note = f", {len(ts)} traces{' (capped)' if ts.truncated else ''}, 100% pass"


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_bug_detection(tmp_path):
    with verdict(6, "double-vote bug caught by model and by replay") as v:
        _, violations = explore(inject_bug(ElectionModel(3, 1)))
        assert violations
        assert violations[0].invariant_name == "AtMostOneLeaderPerTerm"
        assert not at_most_one_leader_per_term(violations[0].state)
        graph, _ = explore(ElectionModel(3, 1))
        write_graph(graph, tmp_path / "g.jsonl")
        write_traces(enumerate_traces(graph, TraceGenLimits(max_traces=10_000)), tmp_path / "t.jsonl")
        suite = run_suite(
            tmp_path / "g.jsonl", tmp_path / "t.jsonl", buggy=True, fail_fast=True, step_timeout_ms=2000
        )
        first = suite.first_failure
        assert first is not None and first.reason in ("state_mismatch", "timeout")
        v.note = f", {len(violations)} violating states, replay: {first.summary()}"


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_disabled_anchor_transparency(monkeypatch):
    with verdict(7, "election completes with anchors disabled and no player") as v:
        monkeypatch.setenv("DETRACE_ENABLED", "0")
        monkeypatch.setenv("DETRACE_PLAYER_ADDR", "127.0.0.1:1")
        nodes = run_election(3, seed=7, timeout_s=10)
        leaders = [n.node for n in nodes if n.role == "leader"]
        assert leaders
        assert sum(n.anchors.frames_sent for n in nodes) == 0
        v.note = f", leader node {leaders[0]}, 0 frames"


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_pipeline_determinism(tmp_path):
    with verdict(8, "check-model and tracegen are byte-identical across runs"):
        runner = CliRunner()
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            r = runner.invoke(main, ["check-model", "--nodes", "3", "--out", str(d / "g.jsonl")])
            assert r.exit_code == 0, r.output
            r = runner.invoke(main, ["tracegen", "--graph", str(d / "g.jsonl"), "--out", str(d / "t.jsonl")])
            assert r.exit_code == 0, r.output
        for name in ("g.jsonl", "t.jsonl"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
