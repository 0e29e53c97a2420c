"""The deterministic player: replays one trace by gating anchor requests.

Requests arrive over many connections but are decided by one
:class:`Coordinator` under a lock, so grants are totally ordered.  A request
for an action that is not the current step is parked; its connection
handler waits without holding the lock and is woken when the request is
granted, when the run ends, or when it fails.
"""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from .canon import canon_decode, canon_encode
from .model import Action, Trace, action_matches, state_matches
from .tracegen import load_trace
from .wire import (
    PROTO_VERSION,
    ActionReq,
    Bye,
    Done,
    Fail,
    FrameError,
    Hello,
    Pass,
    SchemaError,
    WireError,
    decode_frame,
    encode_frame,
)

log = logging.getLogger(__name__)

DEFAULT_STEP_TIMEOUT_MS = 10_000

GRANT, PARK, FAIL, DONE = "grant", "park", "fail", "done"


class ConfigError(ValueError):
    pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class PlayerConfig:
    trace_file: str
    trace_index: int = 0
    listen_addr: str = "127.0.0.1:9000"
    step_timeout_ms: int = DEFAULT_STEP_TIMEOUT_MS
    report_path: str | None = None

    def __post_init__(self):
        if self.trace_index < 0:
            raise ConfigError("trace_index must be >= 0")
        if self.step_timeout_ms <= 0:
            raise ConfigError("step_timeout_ms must be positive")
        parse_addr(self.listen_addr)


@dataclass
class RunReport:
    trace_index: int
    status: str
    failed_step: int | None = None
    reason: str | None = None
    detail: str | None = None
    expected_action: Action | None = None
    received_actions: list[Action] = field(default_factory=list)
    granted: list[Action] = field(default_factory=list)
    elapsed_ms: int = 0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_canon(self) -> dict:
        return {
            "type": "report",
            "trace_index": self.trace_index,
            "status": self.status,
            "failed_step": self.failed_step,
            "reason": self.reason,
            "detail": self.detail,
            "expected_action": None
            if self.expected_action is None
            else self.expected_action.to_canon(),
            "received_actions": [a.to_canon() for a in self.received_actions],
            "granted": [a.to_canon() for a in self.granted],
            "elapsed_ms": self.elapsed_ms,
        }

    @classmethod
    def from_canon(cls, d: dict) -> RunReport:
        ea = d.get("expected_action")
        return cls(
            trace_index=d["trace_index"],
            status=d["status"],
            failed_step=d.get("failed_step"),
            reason=d.get("reason"),
            detail=d.get("detail"),
            expected_action=None if ea is None else Action.from_canon(ea),
            received_actions=[Action.from_canon(a) for a in d.get("received_actions", [])],
            granted=[Action.from_canon(a) for a in d.get("granted", [])],
            elapsed_ms=d.get("elapsed_ms", 0),
        )

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(canon_encode(self.to_canon()) + b"\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> RunReport:
        return cls.from_canon(canon_decode(Path(path).read_bytes()))

    def summary(self) -> str:
        if self.passed:
            return f"trace {self.trace_index}: pass ({len(self.granted)} steps, {self.elapsed_ms} ms)"
        exp = f", expected {self.expected_action}" if self.expected_action else ""
        return (
            f"trace {self.trace_index}: FAIL at step {self.failed_step}: "
            f"{self.reason}{exp} ({self.detail})"
        )


class _Pending:
    __slots__ = ("req", "reply", "arrived")

    def __init__(self, req: ActionReq, reply: Callable, arrived: float):
        self.req = req
        self.reply = reply
        self.arrived = arrived


class Coordinator:
    """Owns the cursor over one trace and decides every action request.

    ``reply`` callbacks are invoked with the lock held and must not block.
    """

    def __init__(
        self,
        trace: Trace,
        *,
        trace_index: int = 0,
        step_timeout_ms: int = DEFAULT_STEP_TIMEOUT_MS,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.trace = trace
        self.trace_index = trace_index
        self.timeout = step_timeout_ms / 1000.0
        self.clock = clock
        self.step_index = 0
        self.finished = threading.Event()
        self._lock = threading.Lock()
        self._parked: list[_Pending] = []
        self._open_begin: Action | None = None
        self._granted: list[Action] = []
        self._received: list[Action] = []
        self._status: str | None = None
        self._failure: Fail | None = None
        self._failed_step: int | None = None
        self._started = clock()
        self._step_since = self._started
        self._ended: float | None = None
        counts: dict[int, int] = {}
        self._node_seq = []
        for st in trace.steps:
            n = st.action.node
            self._node_seq.append(counts.get(n, 0))
            counts[n] = counts.get(n, 0) + 1
        if not trace.steps:
            self._finish("pass")

    # -- queries -----------------------------------------------------------

    @property
    def status(self) -> str | None:
        return self._status

    def grant_log(self) -> list[Action]:
        with self._lock:
            return list(self._granted)

    def failure(self) -> Fail | None:
        with self._lock:
            return self._failure

    def parked(self) -> list[ActionReq]:
        with self._lock:
            return [p.req for p in self._parked]

    def report(self) -> RunReport:
        with self._lock:
            end = self._ended if self._ended is not None else self.clock()
            f = self._failure
            return RunReport(
                trace_index=self.trace_index,
                status=self._status or "running",
                failed_step=self._failed_step,
                reason=f.reason if f else None,
                detail=f.detail if f else None,
                expected_action=f.expected_action if f else None,
                received_actions=list(self._received),
                granted=list(self._granted),
                elapsed_ms=int(round((end - self._started) * 1000)),
            )

    # -- decisions ---------------------------------------------------------

    def submit(self, req: ActionReq, reply: Callable) -> tuple[str, _Pending]:
        """Decide a freshly arrived request; returns ``(decision, ticket)``."""
        with self._lock:
            p = _Pending(req, reply, self.clock())
            if self._status is None:
                self._received.append(req.action)
            d = self.handle_action(p, fresh=True)
            if d == PARK:
                self._parked.append(p)
            elif d == GRANT:
                self._drain()
            return d, p

    def cancel(self, ticket: _Pending) -> None:
        """Forget a parked request whose connection went away."""
        with self._lock:
            if ticket in self._parked:
                self._parked.remove(ticket)

    def handle_action(self, p: _Pending, fresh: bool) -> str:
        if self._status == "pass":
            p.reply(Done())
            return DONE
        if self._status == "fail":
            p.reply(self._failure)
            return FAIL
        req = p.req
        idx = self.step_index
        step = self.trace.steps[idx]
        seq = self._node_seq[idx]

        if req.phase == "end":
            ob = self._open_begin
            if ob is None or (ob.name, ob.node) != (req.name, req.node):
                return self._fail(
                    "protocol_error", f"end of {req.name}@{req.node} without a matching begin", p
                )
            m = state_matches(req.observed_state, step.post_state)
            if not m.ok:
                return self._fail("state_mismatch", m.describe(), p)
            p.reply(Pass(idx, None, step.post_state, seq))
            self._open_begin = None
            self._advance()
            return GRANT

        if self._open_begin is not None:
            if fresh and req.phase == "begin" and action_matches(req.action, step.action):
                return self._fail(
                    "protocol_error", f"second begin for step {idx} while one is open", p
                )
            return PARK

        if req.phase == "begin":
            if action_matches(req.action, step.action, "verify"):
                self._open_begin = step.action
                p.reply(Pass(idx, None, None, seq))
                return GRANT
            return PARK

        if action_matches(req.action, step.action, req.mode):
            m = state_matches(req.observed_state, step.post_state)
            if not m.ok:
                return self._fail("state_mismatch", m.describe(), p)
            payload = step.action.payload if req.mode == "drive" else None
            p.reply(Pass(idx, payload, step.post_state, seq))
            self._advance()
            return GRANT
        return PARK

    def _drain(self) -> None:
        # re-evaluate parked requests in arrival order until none can move
        progressed = True
        while progressed and self._status is None:
            progressed = False
            for k, p in enumerate(self._parked):
                # out of the list while deciding, so a finish does not reply twice
                del self._parked[k]
                if self.handle_action(p, fresh=False) == PARK:
                    self._parked.insert(k, p)
                    continue
                progressed = True
                break

    def _advance(self) -> None:
        self._granted.append(self.trace.steps[self.step_index].action)
        self.step_index += 1
        self._step_since = self.clock()
        if self.step_index == len(self.trace.steps):
            self._finish("pass")

    def _finish(self, status: str) -> None:
        self._status = status
        self._ended = self.clock()
        msg = Done() if status == "pass" else self._failure
        for q in self._parked:
            q.reply(msg)
        self._parked.clear()
        self.finished.set()

    def _fail(
        self, reason: str, detail: str, p: _Pending | None = None, step: int | None = None
    ) -> str:
        if self._status is not None:
            return FAIL
        idx = self.step_index if step is None else step
        expected = self.trace.steps[idx].action if idx < len(self.trace.steps) else None
        self._failure = Fail(reason, detail, expected)
        self._failed_step = idx
        log.info("trace %d failed at step %d: %s: %s", self.trace_index, idx, reason, detail)
        if p is not None:
            p.reply(self._failure)
        self._finish("fail")
        return FAIL

    def fail(self, reason: str, detail: str, step: int | None = None) -> None:
        """Fail the run from outside the request path (harness abort, protocol
        misuse).  *step* overrides the recorded failing step."""
        with self._lock:
            self._fail(reason, detail, step=step)

    def check_timeouts(self, now: float | None = None) -> bool:
        """Fail the run if the current step or a parked request has waited
        longer than the step timeout.  Returns True if it failed the run."""
        with self._lock:
            if self._status is not None:
                return False
            now = self.clock() if now is None else now
            if now - self._step_since > self.timeout:
                step = self.trace.steps[self.step_index]
                self._fail(
                    "timeout",
                    f"step {self.step_index} ({step.action}) not reached within "
                    f"{self.timeout * 1000:.0f} ms",
                )
                return True
            if self._parked and now - self._parked[0].arrived > self.timeout:
                stale = self._parked[0].req
                self._fail(
                    "timeout",
                    f"request {stale.phase} {stale.action} waited more than "
                    f"{self.timeout * 1000:.0f} ms without its turn",
                )
                return True
            return False


class _Slot:
    __slots__ = ("event", "value")

    def __init__(self):
        self.event = threading.Event()
        self.value = None

    def set(self, value) -> None:
        if not self.event.is_set():
            self.value = value
            self.event.set()


class Player:
    """Socket front end for a :class:`Coordinator`.

    ``listen=("127.0.0.1", 0)`` binds an ephemeral port; see :attr:`address`.
    """

    def __init__(
        self,
        trace: Trace,
        *,
        trace_index: int = 0,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        step_timeout_ms: int = DEFAULT_STEP_TIMEOUT_MS,
        proto_version: int = PROTO_VERSION,
    ):
        self.coordinator = Coordinator(
            trace, trace_index=trace_index, step_timeout_ms=step_timeout_ms
        )
        self.proto_version = proto_version
        self._listen = listen
        self._sock: socket.socket | None = None
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._idle = threading.Condition(self._conns_lock)
        self._threads: list[threading.Thread] = []
        self._closing = threading.Event()
        self.frames_in = 0

    @property
    def address(self) -> tuple[str, int]:
        assert self._sock is not None, "player not started"
        return self._sock.getsockname()[:2]

    @property
    def addr_str(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> Player:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(self._listen)
        except OSError:
            sock.close()
            raise
        sock.listen(128)
        self._sock = sock
        for target in (self._accept_loop, self._watchdog):
            t = threading.Thread(target=target, name=f"player-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def __enter__(self):
        return self.start() if self._sock is None else self

    def __exit__(self, *exc):
        self.close()

    def wait(self, timeout: float | None = None) -> RunReport | None:
        if not self.coordinator.finished.wait(timeout):
            return None
        return self.coordinator.report()

    def grant_log(self) -> list[Action]:
        return self.coordinator.grant_log()

    def abort(self, reason: str, detail: str, step: int | None = None) -> None:
        self.coordinator.fail(reason, detail, step)

    def wait_idle(self, timeout: float) -> bool:
        """Wait until every client connection has closed."""
        with self._idle:
            return self._idle.wait_for(lambda: not self._conns, timeout)

    def close(self, linger: float = 0.0) -> None:
        if linger:
            self.wait_idle(linger)
        self._closing.set()
        if not self.coordinator.finished.is_set():
            self.coordinator.fail("timeout", "player stopped before the trace completed")
        if self._sock is not None:
            try:
                # shutdown wakes a thread blocked in accept(); close alone does not
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2)

    # -- threads -----------------------------------------------------------

    def _watchdog(self) -> None:
        tick = min(0.05, self.coordinator.timeout / 10)
        while not self.coordinator.finished.wait(tick):
            self.coordinator.check_timeouts()

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            self._conversation(conn)
        except (OSError, WireError) as exc:
            log.debug("connection closed: %s", exc)
        finally:
            try:
                conn.close()
            except OSError:
                pass
            with self._conns_lock:
                self._conns.discard(conn)
                self._idle.notify_all()

    def _conversation(self, conn: socket.socket) -> None:
        coord = self.coordinator
        stream = conn.makefile("rb")
        node: int | None = None
        while True:
            try:
                msg = decode_frame(stream)
            except FrameError:
                return
            except SchemaError as exc:
                coord.fail("protocol_error", f"malformed request: {exc}")
                conn.sendall(encode_frame(Fail("protocol_error", str(exc))))
                return
            self.frames_in += 1
            if isinstance(msg, Hello):
                if msg.proto_version != self.proto_version:
                    conn.sendall(
                        encode_frame(
                            Fail(
                                "protocol_error",
                                f"proto_version {msg.proto_version} != {self.proto_version}",
                            )
                        )
                    )
                    return
                node = msg.node
                conn.sendall(encode_frame(Pass(coord.step_index)))
            elif isinstance(msg, Bye):
                return
            elif isinstance(msg, ActionReq):
                if node is None or msg.node != node:
                    detail = (
                        "action request before hello"
                        if node is None
                        else f"request for node {msg.node} on a node {node} connection"
                    )
                    coord.fail("protocol_error", detail)
                    conn.sendall(encode_frame(coord.failure() or Fail("protocol_error", detail)))
                    return
                slot = _Slot()
                decision, ticket = coord.submit(msg, slot.set)
                if decision == PARK:
                    while not slot.event.wait(0.5):
                        if self._closing.is_set():
                            coord.cancel(ticket)
                            return
                conn.sendall(encode_frame(slot.value))
            else:
                coord.fail("protocol_error", f"unexpected {type(msg).__name__} from client")
                return


def serve(config: PlayerConfig, *, linger: float = 0.25, on_listen=None) -> RunReport:
    """Run a player for one trace until it passes or fails."""
    try:
        trace = load_trace(config.trace_file, config.trace_index)
    except IndexError:
        raise ConfigError(
            f"trace index {config.trace_index} not in {config.trace_file}"
        ) from None
    player = Player(
        trace,
        trace_index=config.trace_index,
        listen=parse_addr(config.listen_addr),
        step_timeout_ms=config.step_timeout_ms,
    )
    player.start()
    log.info("player listening on %s, trace %d (%d steps)", player.addr_str, config.trace_index, len(trace))
    if on_listen is not None:
        on_listen(player)
    try:
        report = player.wait()
    finally:
        player.close(linger=linger)
    assert report is not None
    if config.report_path:
        report.write(config.report_path)
    return report
