"""Control messages between anchor clients and the player, and their framing.

A frame is a 4-byte big-endian body length followed by the canonical
encoding of one message map.  Unknown ``type`` values are rejected; unknown
extra keys are ignored.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import Any, Union

from .canon import CanonValue, ParseError, canon_decode, canon_encode
from .model import Action, ActionKind, State

PROTO_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")

PHASES = ("atomic", "begin", "end")
MODES = ("verify", "drive")
FAIL_REASONS = (
    "unexpected_action",
    "state_mismatch",
    "timeout",
    "trace_exhausted",
    "protocol_error",
)


class WireError(Exception):
    pass


class MessageTooLarge(WireError):
    pass


class FrameError(WireError):
    """Short read or oversize length prefix."""


class SchemaError(WireError):
    """Frame body is not a valid control message."""


@dataclass(frozen=True)
class Hello:
    node: int
    proto_version: int = PROTO_VERSION

    def to_canon(self) -> dict:
        return {"type": "hello", "node": self.node, "proto_version": self.proto_version}


@dataclass(frozen=True)
class ActionReq:
    phase: str
    kind: ActionKind
    name: str
    node: int
    payload: CanonValue = None
    mode: str = "verify"
    observed_state: State | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if self.phase not in PHASES:
            raise SchemaError(f"bad phase {self.phase!r}")
        if self.mode not in MODES:
            raise SchemaError(f"bad mode {self.mode!r}")
        internal = self.kind is ActionKind.INTERNAL
        if (self.phase == "atomic") == internal:
            raise SchemaError(f"phase {self.phase!r} not allowed for {self.kind.value} actions")
        if self.mode == "drive" and self.kind is not ActionKind.INPUT:
            raise SchemaError("drive mode is only for input actions")
        if self.observed_state is not None and not isinstance(self.observed_state, State):
            object.__setattr__(self, "observed_state", State(self.observed_state))
        try:
            object.__setattr__(self, "_action", Action(self.kind, self.name, self.node, self.payload))
        except ValueError as exc:
            raise SchemaError(str(exc)) from None

    @property
    def action(self) -> Action:
        return self._action  # type: ignore[attr-defined]

    def to_canon(self) -> dict:
        return {
            "type": "action",
            "phase": self.phase,
            "kind": self.kind.value,
            "name": self.name,
            "node": self.node,
            "payload": self.payload,
            "mode": self.mode,
            "observed_state": None
            if self.observed_state is None
            else self.observed_state.to_dict(),
        }


@dataclass(frozen=True)
class Bye:
    node: int

    def to_canon(self) -> dict:
        return {"type": "bye", "node": self.node}


@dataclass(frozen=True)
class Pass:
    step_index: int
    payload: CanonValue = None
    expected_state: State | None = None
    # steps of the same node granted before this one; lets a node apply
    # grants that race on separate connections in trace order
    node_seq: int | None = None

    def to_canon(self) -> dict:
        d = {
            "type": "pass",
            "step_index": self.step_index,
            "payload": self.payload,
            "expected_state": None
            if self.expected_state is None
            else self.expected_state.to_dict(),
        }
        if self.node_seq is not None:
            d["node_seq"] = self.node_seq
        return d


@dataclass(frozen=True)
class Fail:
    reason: str
    detail: str = ""
    expected_action: Action | None = None

    def __post_init__(self):
        if self.reason not in FAIL_REASONS:
            raise SchemaError(f"unknown fail reason {self.reason!r}")

    def to_canon(self) -> dict:
        return {
            "type": "fail",
            "reason": self.reason,
            "detail": self.detail,
            "expected_action": None
            if self.expected_action is None
            else self.expected_action.to_canon(),
        }


@dataclass(frozen=True)
class Done:
    def to_canon(self) -> dict:
        return {"type": "done"}


ControlRequest = Union[Hello, ActionReq, Bye]
ControlResponse = Union[Pass, Fail, Done]
Message = Union[ControlRequest, ControlResponse]


def _int(d: Mapping, key: str, *, minimum: int | None = 0) -> int:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"{key} must be an integer")
    if minimum is not None and v < minimum:
        raise SchemaError(f"{key} must be >= {minimum}")
    return v


def _str(d: Mapping, key: str) -> str:
    v = d.get(key)
    if not isinstance(v, str):
        raise SchemaError(f"{key} must be a string")
    return v


def _state(d: Mapping, key: str) -> State | None:
    v = d.get(key)
    if v is None:
        return None
    if not isinstance(v, dict):
        raise SchemaError(f"{key} must be a map or null")
    return State(v)


def message_from_canon(d: Any) -> Message:
    if not isinstance(d, dict):
        raise SchemaError("message is not a map")
    t = d.get("type")
    try:
        if t == "hello":
            return Hello(_int(d, "node"), _int(d, "proto_version", minimum=None))
        if t == "action":
            return ActionReq(
                phase=_str(d, "phase"),
                kind=ActionKind(_str(d, "kind")),
                name=_str(d, "name"),
                node=_int(d, "node"),
                payload=d.get("payload"),
                mode=_str(d, "mode"),
                observed_state=_state(d, "observed_state"),
            )
        if t == "bye":
            return Bye(_int(d, "node"))
        if t == "pass":
            seq = d.get("node_seq")
            return Pass(
                _int(d, "step_index"),
                d.get("payload"),
                _state(d, "expected_state"),
                None if seq is None else _int(d, "node_seq"),
            )
        if t == "fail":
            ea = d.get("expected_action")
            return Fail(
                _str(d, "reason"),
                d.get("detail") or "",
                None if ea is None else Action.from_canon(ea),
            )
        if t == "done":
            return Done()
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad {t} message: {exc}") from None
    raise SchemaError(f"unknown message type {t!r}")


def encode_message(msg: Message) -> bytes:
    return canon_encode(msg.to_canon())


def decode_message(body: bytes) -> Message:
    try:
        d = canon_decode(body)
    except ParseError as exc:
        raise SchemaError(f"undecodable body: {exc}") from None
    return message_from_canon(d)


def encode_frame(msg: Message) -> bytes:
    body = encode_message(msg)
    if len(body) > MAX_FRAME:
        raise MessageTooLarge(f"body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise FrameError(f"short read: wanted {n} bytes, got {len(buf)}")
        buf += chunk
    return bytes(buf)


def decode_frame(stream) -> Message:
    """Read exactly one frame from a binary stream (anything with ``read``)."""
    (length,) = HEADER.unpack(_read_exact(stream, HEADER.size))
    if length > MAX_FRAME:
        raise FrameError(f"frame length {length} exceeds {MAX_FRAME}")
    return decode_message(_read_exact(stream, length))


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, iterate complete messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> Iterator[Message]:
        self._buf += chunk
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise FrameError(f"frame length {length} exceeds {MAX_FRAME}")
            if len(self._buf) < HEADER.size + length:
                break
            body = bytes(self._buf[HEADER.size : HEADER.size + length])
            del self._buf[: HEADER.size + length]
            yield decode_message(body)

    @property
    def pending(self) -> int:
        return len(self._buf)
