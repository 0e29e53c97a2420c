"""Action anchors for systems under test.

A system calls :meth:`AnchorHandle.input`, :meth:`~AnchorHandle.output`,
:meth:`~AnchorHandle.begin_internal` and :meth:`~AnchorHandle.end_internal`
where it performs a modelled action.  With anchors disabled these return
immediately and touch no sockets.  Enabled, each call becomes one blocking
request to the player, which returns only when the action's step in the
trace is current.

Every in-flight call uses its own connection (pooled per handle), so a
parked call never holds up another task of the same node.

Environment: ``DETRACE_ENABLED`` (``0``/``1``), ``DETRACE_PLAYER_ADDR``
(``host:port``), ``DETRACE_NODE_ID``.
"""

from __future__ import annotations

import os
import socket
import threading
from collections.abc import Mapping
from dataclasses import dataclass, replace

from .canon import CanonValue
from .model import Action, State, as_state, state_matches
from .player import parse_addr
from .wire import (
    ActionReq,
    Bye,
    Done,
    Fail,
    FrameError,
    Hello,
    Pass,
    SchemaError,
    decode_frame,
    encode_frame,
)

DEFAULT_PLAYER_ADDR = "127.0.0.1:9000"

_ABSENT = object()


class AnchorError(Exception):
    pass


class ConnectError(AnchorError):
    pass


class HandshakeError(AnchorError):
    pass


class ConnectionLost(AnchorError):
    pass


class ProtocolMisuse(AnchorError):
    pass


class ReplayFail(AnchorError):
    """The player (or a local state check) rejected this run."""

    def __init__(
        self,
        reason: str,
        detail: str = "",
        expected_action: Action | None = None,
        step_index: int | None = None,
    ):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail
        self.expected_action = expected_action
        self.step_index = step_index


class TraceComplete(Exception):
    """The trace has been fully replayed; no further actions will be granted."""


def _truthy(v: str | None) -> bool:
    return (v or "").strip().lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class AnchorConfig:
    enabled: bool = False
    player_addr: str = DEFAULT_PLAYER_ADDR
    node: int = 0
    connect_timeout_ms: int = 5_000

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None, **overrides) -> AnchorConfig:
        env = os.environ if environ is None else environ
        cfg = cls(
            enabled=_truthy(env.get("DETRACE_ENABLED")),
            player_addr=env.get("DETRACE_PLAYER_ADDR") or DEFAULT_PLAYER_ADDR,
            node=int(env.get("DETRACE_NODE_ID") or 0),
        )
        return replace(cfg, **overrides)


@dataclass(frozen=True)
class Grant:
    """What the player said when it let an anchor call through."""

    step_index: int
    payload: CanonValue = None
    expected_state: State | None = None
    node_seq: int | None = None


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.stream = sock.makefile("rb")

    def call(self, msg):
        self.sock.sendall(encode_frame(msg))
        return decode_frame(self.stream)

    def close(self, bye: Bye | None = None) -> None:
        try:
            if bye is not None:
                self.sock.sendall(encode_frame(bye))
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.stream.close()
        self.sock.close()


class AnchorHandle:
    def __init__(self, config: AnchorConfig | None = None):
        self.config = config or AnchorConfig()
        self.frames_sent = 0
        self._lock = threading.Lock()
        self._idle: list[_Conn] = []
        self._all: set[_Conn] = set()
        self._open: set[str] = set()
        self._closed = False
        self._tls = threading.local()

    @property
    def enabled(self) -> bool:
        return self.config.enabled

    @property
    def node(self) -> int:
        return self.config.node

    # -- connections -------------------------------------------------------

    def _connect(self) -> _Conn:
        host, port = parse_addr(self.config.player_addr)
        timeout = self.config.connect_timeout_ms / 1000.0
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectError(f"cannot reach player at {self.config.player_addr}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Conn(sock)
        try:
            self.frames_sent += 1
            resp = conn.call(Hello(self.node))
        except (OSError, FrameError, SchemaError) as exc:
            conn.close()
            raise HandshakeError(f"handshake with player failed: {exc}") from exc
        if isinstance(resp, Fail):
            conn.close()
            raise HandshakeError(f"player refused handshake: {resp.detail}")
        sock.settimeout(None)
        with self._lock:
            self._all.add(conn)
        return conn

    def _acquire(self) -> _Conn:
        with self._lock:
            if self._closed:
                raise ConnectionLost("anchor handle closed")
            if self._idle:
                return self._idle.pop()
        try:
            return self._connect()
        except (ConnectError, HandshakeError) as exc:
            if self._closed:
                raise ConnectionLost("anchor handle closed") from exc
            raise

    def _release(self, conn: _Conn) -> None:
        with self._lock:
            if not self._closed:
                self._idle.append(conn)
                return
        conn.close(Bye(self.node))

    def _discard(self, conn: _Conn) -> None:
        with self._lock:
            self._all.discard(conn)
        conn.close()

    def connect(self) -> AnchorHandle:
        """Open one connection eagerly so a dead player is reported at init."""
        if self.enabled:
            self._release(self._connect())
        return self

    def close(self) -> None:
        """Say bye on idle connections and cut any blocked calls loose."""
        with self._lock:
            self._closed = True
            idle, self._idle = self._idle, []
            everything = list(self._all)
            self._all.clear()
        for c in idle:
            c.close(Bye(self.node))
        for c in everything:
            if c not in idle:
                c.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- requests ----------------------------------------------------------

    def _call(self, req: ActionReq) -> Grant:
        conn = self._acquire()
        try:
            self.frames_sent += 1
            resp = conn.call(req)
        except (OSError, FrameError, SchemaError, ValueError) as exc:
            self._discard(conn)
            raise ConnectionLost(f"lost player connection: {exc}") from exc
        self._release(conn)
        if isinstance(resp, Pass):
            grant = Grant(resp.step_index, resp.payload, resp.expected_state, resp.node_seq)
            self._tls.grant = grant
            return grant
        if isinstance(resp, Done):
            raise TraceComplete()
        if isinstance(resp, Fail):
            raise ReplayFail(resp.reason, resp.detail, resp.expected_action)
        raise ConnectionLost(f"unexpected reply {resp!r}")

    @property
    def last_grant(self) -> Grant | None:
        """The most recent grant received by the calling thread."""
        return getattr(self._tls, "grant", None)

    def input(
        self,
        name: str,
        payload: CanonValue = _ABSENT,
        observed_state: State | Mapping | None = None,
    ) -> CanonValue:
        """Anchor an input action.

        With a payload the player verifies it against the trace; without
        one (drive mode) the player supplies the trace's payload, which is
        returned.
        """
        drive = payload is _ABSENT
        if not self.enabled:
            return None if drive else payload
        req = ActionReq(
            "atomic",
            "input",
            name,
            self.node,
            None if drive else payload,
            "drive" if drive else "verify",
            as_state(observed_state),
        )
        grant = self._call(req)
        return grant.payload if drive else payload

    def output(
        self, name: str, payload: CanonValue = None, observed_state: State | Mapping | None = None
    ) -> None:
        if not self.enabled:
            return
        self._call(
            ActionReq("atomic", "output", name, self.node, payload, "verify", as_state(observed_state))
        )

    def begin_internal(self, name: str, payload: CanonValue = None) -> None:
        if not self.enabled:
            return
        with self._lock:
            if name in self._open:
                raise ProtocolMisuse(f"internal action {name} already begun on node {self.node}")
            self._open.add(name)
        try:
            self._call(ActionReq("begin", "internal", name, self.node, payload))
        except BaseException:
            with self._lock:
                self._open.discard(name)
            raise

    def end_internal(self, name: str, observed_state: State | Mapping | None = None) -> None:
        if not self.enabled:
            return
        with self._lock:
            if name not in self._open:
                raise ProtocolMisuse(f"end_internal({name}) without begin_internal")
            self._open.discard(name)
        self._call(
            ActionReq("end", "internal", name, self.node, None, "verify", as_state(observed_state))
        )

    def verify_state(self, observed: State | Mapping) -> None:
        """Check *observed* against the post-state of this thread's last grant.

        For anchors that let an action through before the system has
        carried it out, so the resulting state can only be checked after.
        """
        if not self.enabled:
            return
        grant = self.last_grant
        if grant is None or grant.expected_state is None:
            return
        m = state_matches(observed, grant.expected_state)
        if not m.ok:
            raise ReplayFail("state_mismatch", m.describe(), step_index=grant.step_index)


def anchor_init(config: AnchorConfig | None = None) -> AnchorHandle:
    """Build a handle from *config* (default: the environment); an enabled
    handle connects and handshakes immediately."""
    return AnchorHandle(config or AnchorConfig.from_env()).connect()
