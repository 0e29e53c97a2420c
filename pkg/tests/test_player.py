import itertools
import threading
import time

import pytest

from detrace.anchor import AnchorConfig, HandshakeError, ReplayFail, TraceComplete, anchor_init
from detrace.model import State, Trace
from detrace.player import (
    DONE,
    FAIL,
    GRANT,
    PARK,
    ConfigError,
    Coordinator,
    Player,
    PlayerConfig,
    RunReport,
    parse_addr,
    serve,
)
from detrace.tracegen import TraceSet, write_traces
from detrace.wire import ActionReq, Done, Pass

from conftest import act, inp, make_trace, out


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def req_for(a, phase="atomic", mode="verify", observed=None, payload="same"):
    p = a.payload if payload == "same" else payload
    return ActionReq(phase, a.kind, a.name, a.node, p, mode, observed)


class Client:
    """Collects replies for one request."""

    def __init__(self, coord, req):
        self.replies = []
        self.decision, self.ticket = coord.submit(req, self.replies.append)

    @property
    def reply(self):
        assert len(self.replies) == 1, self.replies
        return self.replies[0]


P1, P2 = out("Pi", 1, 1), out("Pi", 2, 2)


class TestCoordinator:
    def test_empty_trace_passes_immediately(self):
        c = Coordinator(Trace(State({})))
        assert c.status == "pass" and c.report().passed
        assert Client(c, req_for(P1)).reply == Done()

    def test_reorder(self):
        c = Coordinator(make_trace(P1, P2))
        second = Client(c, req_for(P2))
        assert second.decision == PARK and second.replies == []
        first = Client(c, req_for(P1))
        assert first.decision == GRANT
        assert first.reply.step_index == 0 and second.reply.step_index == 1
        assert c.grant_log() == [P1, P2]
        assert c.status == "pass"

    @pytest.mark.parametrize("perm", list(itertools.permutations(range(5))))
    def test_every_arrival_order(self, perm):
        actions = [out("Step", i % 3, i) for i in range(5)]
        c = Coordinator(make_trace(*actions))
        clients = [Client(c, req_for(actions[i])) for i in perm]
        assert c.grant_log() == actions
        assert all(isinstance(cl.reply, Pass) for cl in clients)

    def test_node_seq(self):
        trace = make_trace(out("A", 1), out("B", 2), out("C", 1))
        c = Coordinator(trace)
        seqs = [Client(c, req_for(a)).reply.node_seq for a in trace.actions]
        assert seqs == [0, 0, 1]

    def test_drive_payload(self):
        step = inp("In", 2, {"v": 7})
        c = Coordinator(make_trace(step))
        r = Client(c, req_for(step, mode="drive", payload=None)).reply
        assert r.payload == {"v": 7} and r.expected_state == State({"k": 1})

    def test_verify_payload_mismatch_parks(self):
        c = Coordinator(make_trace(out("A", 1, 1)))
        assert Client(c, req_for(out("A", 1, 2))).decision == PARK

    def test_atomic_state_mismatch(self):
        c = Coordinator(make_trace(P1, P2))
        parked = Client(c, req_for(P2))
        bad = Client(c, req_for(P1, observed={"k": 5}))
        assert bad.decision == FAIL and bad.reply.reason == "state_mismatch"
        assert parked.reply == bad.reply
        assert c.grant_log() == []
        assert Client(c, req_for(P2)).reply.reason == "state_mismatch"
        rep = c.report()
        assert rep.status == "fail" and rep.failed_step == 0 and rep.expected_action == P1

    def test_internal_begin_end(self):
        t = act("Tick", 1)
        c = Coordinator(make_trace(t, P2))
        other = Client(c, req_for(P2))
        begin = Client(c, req_for(t, phase="begin"))
        assert begin.reply == Pass(0, None, None, 0)
        assert c.step_index == 0 and other.replies == []
        end = Client(c, req_for(t, phase="end", payload=None, observed={"k": 1}))
        assert end.reply.expected_state == State({"k": 1})
        assert c.grant_log() == [t, P2]

    def test_internal_end_mismatch(self):
        t = act("Tick", 1)
        c = Coordinator(make_trace(t))
        Client(c, req_for(t, phase="begin"))
        end = Client(c, req_for(t, phase="end", payload=None, observed={"k": 0}))
        assert end.reply.reason == "state_mismatch" and c.grant_log() == []

    def test_end_without_begin(self):
        t = act("Tick", 1)
        c = Coordinator(make_trace(t))
        r = Client(c, req_for(t, phase="end", payload=None)).reply
        assert r.reason == "protocol_error"

    def test_second_begin(self):
        t = act("Tick", 1)
        c = Coordinator(make_trace(t))
        Client(c, req_for(t, phase="begin"))
        assert Client(c, req_for(t, phase="begin")).reply.reason == "protocol_error"

    def test_step_timeout(self):
        clock = FakeClock()
        c = Coordinator(make_trace(P1, P2), step_timeout_ms=1000, clock=clock)
        stray = Client(c, req_for(out("Pi", 3, 3)))
        clock.t = 0.9
        assert not c.check_timeouts()
        clock.t = 1.1
        assert c.check_timeouts()
        assert stray.reply == c.failure()
        assert stray.reply.reason == "timeout" and stray.reply.expected_action == P1

    def test_parked_request_timeout(self):
        clock = FakeClock()
        c = Coordinator(make_trace(P1, P2, out("Pi", 3, 3)), step_timeout_ms=1000, clock=clock)
        Client(c, req_for(out("Pi", 3, 3)))
        clock.t = 0.8
        Client(c, req_for(P1))
        clock.t = 1.6
        # the step itself stalled only 0.8 s; the parked request is what expires
        assert c.check_timeouts()
        assert c.report().failed_step == 1 and c.report().reason == "timeout"

    def test_grant_log_prefix_after_failure(self):
        actions = [out("S", 1, i) for i in range(4)]
        c = Coordinator(make_trace(*actions))
        for a in actions[:2]:
            Client(c, req_for(a))
        c.fail("timeout", "gave up")
        assert c.grant_log() == actions[:2]
        assert c.report().failed_step == 2

    def test_done_after_pass(self):
        c = Coordinator(make_trace(P1))
        Client(c, req_for(P1))
        assert Client(c, req_for(P2)).reply == Done()
        assert Client(c, req_for(P1)).decision == DONE


class TestReport:
    def test_round_trip(self, tmp_path):
        r = RunReport(3, "fail", 2, "timeout", "x", P1, [P1, P2], [P1], 17)
        r.write(tmp_path / "r.json")
        assert RunReport.read(tmp_path / "r.json") == r
        assert "FAIL at step 2" in r.summary()


def handle(player, node):
    return anchor_init(AnchorConfig(enabled=True, player_addr=player.addr_str, node=node))


class TestSockets:
    def test_second_node_waits_for_first(self):
        # N1 runs pi1, N2 runs pi2; N2 asks first and must wait for N1
        pi1, pi2 = act("Pi1", 1), act("Pi2", 2)
        with Player(make_trace(pi1, pi2)).start() as p:
            h1, h2 = handle(p, 1), handle(p, 2)
            events = []

            def n2():
                h2.begin_internal("Pi2")
                events.append("pi2 begun")
                h2.end_internal("Pi2")

            t = threading.Thread(target=n2)
            t.start()
            time.sleep(0.2)
            assert events == [] and p.coordinator.parked()
            h1.begin_internal("Pi1")
            events.append("pi1 begun")
            h1.end_internal("Pi1")
            t.join(5)
            rep = p.wait(5)
            assert events == ["pi1 begun", "pi2 begun"]
            assert rep.passed and p.grant_log() == [pi1, pi2]
            h1.close()
            h2.close()

    def test_absent_action_times_out(self):
        with Player(make_trace(P1), step_timeout_ms=300).start() as p:
            h = handle(p, 3)
            start = time.monotonic()
            with pytest.raises(ReplayFail) as ei:
                h.output("Pi", 3)
            assert time.monotonic() - start < 2.3
            assert ei.value.reason == "timeout" and ei.value.expected_action == P1
            h.close()

    def test_version_mismatch(self):
        with Player(make_trace(P1), proto_version=99).start() as p:
            with pytest.raises(HandshakeError):
                handle(p, 1)

    def test_done_after_trace(self):
        with Player(make_trace(P1)).start() as p:
            h = handle(p, 1)
            h.output("Pi", 1)
            with pytest.raises(TraceComplete):
                h.output("Pi", 1)
            h.close()

    def test_close_fails_unfinished_run(self):
        p = Player(make_trace(P1)).start()
        p.close()
        assert p.wait(0).reason == "timeout"


class TestServe:
    def test_config_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            PlayerConfig(str(tmp_path / "t"), listen_addr="nohost")
        with pytest.raises(ConfigError):
            PlayerConfig(str(tmp_path / "t"), step_timeout_ms=0)
        assert parse_addr(":9") == ("127.0.0.1", 9)

    def test_serve_passes_and_writes_report(self, tmp_path):
        traces = tmp_path / "t.jsonl"
        write_traces(TraceSet(0, [make_trace(P1, P2)]), traces)
        cfg = PlayerConfig(str(traces), 0, "127.0.0.1:0", 2000, str(tmp_path / "r.json"))

        def clients(player):
            def run():
                h2, h1 = handle(player, 2), handle(player, 1)
                t = threading.Thread(target=h2.output, args=("Pi", 2))
                t.start()
                h1.output("Pi", 1)
                t.join()
                h1.close()
                h2.close()

            threading.Thread(target=run).start()

        rep = serve(cfg, on_listen=clients)
        assert rep.passed and rep.granted == [P1, P2]
        assert RunReport.read(tmp_path / "r.json") == rep

    def test_bad_index(self, tmp_path):
        traces = tmp_path / "t.jsonl"
        write_traces(TraceSet(0, [make_trace(P1)]), traces)
        with pytest.raises(ConfigError):
            serve(PlayerConfig(str(traces), 5, "127.0.0.1:0"))
