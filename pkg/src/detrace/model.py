"""Shared data model: actions, states, state graphs and traces."""

from __future__ import annotations

import enum
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any

from .canon import CanonValue, canon_decode, canon_encode, check_value, encode_unchecked, hash64

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_STATE_PERSON = b"detrace.state"


class ActionKind(str, enum.Enum):
    INPUT = "input"
    OUTPUT = "output"
    INTERNAL = "internal"


class HashCollision(RuntimeError):
    """Two distinct states produced the same StateId."""


class GraphError(ValueError):
    """A StateGraph invariant would be broken."""


@dataclass(frozen=True, eq=False)
class Action:
    """One action instance: kind, name, the node (task) that yields it, payload."""

    kind: ActionKind
    name: str
    node: int
    payload: CanonValue = None
    key: bytes = field(init=False, repr=False)

    def __post_init__(self):
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.name, str) or not _NAME_RE.match(self.name):
            raise ValueError(f"bad action name {self.name!r}")
        if isinstance(self.node, bool) or not isinstance(self.node, int) or self.node < 0:
            raise ValueError(f"node id must be a non-negative integer, got {self.node!r}")
        check_value(self.payload)
        object.__setattr__(self, "key", canon_encode(self.to_canon()))

    def to_canon(self) -> dict:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "node": self.node,
            "payload": self.payload,
        }

    @classmethod
    def from_canon(cls, d: Mapping[str, Any]) -> Action:
        return cls(ActionKind(d["kind"]), d["name"], d["node"], d.get("payload"))

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __str__(self):
        p = "" if self.payload is None else canon_encode(self.payload).decode()
        return f"{self.kind.value}:{self.name}@{self.node}({p})"


class State(Mapping[str, CanonValue]):
    """Immutable map from variable name to canonical value.

    The constructor takes a private deep copy, so later mutation of the
    argument does not leak in.  Equality and hashing go through the
    canonical encoding.
    """

    __slots__ = ("_vars", "_canon", "_id")

    def __init__(self, vars: Mapping[str, CanonValue] | None = None):
        raw = dict(vars or {})
        for k in raw:
            if not isinstance(k, str):
                raise ValueError(f"state variable name {k!r} is not a string")
        canon = canon_encode(raw)
        self._canon = canon
        self._vars = canon_decode(canon)
        self._id: int | None = None

    @classmethod
    def _trusted(cls, vars: dict, canon: bytes | None = None) -> State:
        # vars must already be a private, decoded copy
        s = cls.__new__(cls)
        s._vars = vars
        s._canon = canon if canon is not None else encode_unchecked(vars)
        s._id = None
        return s

    @property
    def vars(self) -> Mapping[str, CanonValue]:
        return MappingProxyType(self._vars)

    @property
    def canon(self) -> bytes:
        return self._canon

    def to_dict(self) -> dict:
        return canon_decode(self._canon)

    def __getitem__(self, k):
        return self._vars[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self._vars)

    def __len__(self):
        return len(self._vars)

    def __eq__(self, other):
        if isinstance(other, State):
            return self._canon == other._canon
        return NotImplemented

    def __hash__(self):
        return hash(self._canon)

    def __repr__(self):
        return f"State({self._canon.decode()})"

    def replace(self, **changes: CanonValue) -> State:
        d = self.to_dict()
        d.update(changes)
        return State(d)


def state_hash(s: State) -> int:
    """StateId of *s*: BLAKE2b-64 (personalization ``detrace.state``) of the
    canonical encoding of its variables, masked to 63 bits."""
    if s._id is None:
        s._id = hash64(s._canon, person=_STATE_PERSON)
    return s._id


@dataclass(frozen=True)
class Transition:
    src: int
    action: Action
    dst: int


class StateGraph:
    """States keyed by StateId, the initial set, and labelled transitions."""

    def __init__(self, model: str = ""):
        self.model = model
        self.states: dict[int, State] = {}
        self.initial: list[int] = []
        self.transitions: list[Transition] = []
        self.truncated = False
        self._initial_set: set[int] = set()
        self._edge_keys: set[tuple[int, bytes, int]] = set()
        self._succ: dict[int, list[Transition]] | None = None

    def add_state(self, s: State, *, initial: bool = False) -> tuple[int, bool]:
        """Insert *s*; returns ``(state_id, is_new)``.

        Raises :class:`HashCollision` if a different state already owns the id.
        """
        sid = state_hash(s)
        prev = self.states.get(sid)
        new = prev is None
        if new:
            self.states[sid] = s
        elif prev != s:
            raise HashCollision(f"state id {sid} shared by {prev!r} and {s!r}")
        if initial and sid not in self._initial_set:
            self._initial_set.add(sid)
            self.initial.append(sid)
        return sid, new

    def add_transition(self, src: int, action: Action, dst: int) -> bool:
        if src not in self.states or dst not in self.states:
            raise GraphError(f"transition endpoint missing: {src} -> {dst}")
        key = (src, action.key, dst)
        if key in self._edge_keys:
            return False
        self._edge_keys.add(key)
        self.transitions.append(Transition(src, action, dst))
        self._succ = None
        return True

    def has_transition(self, src: int, action: Action, dst: int) -> bool:
        return (src, action.key, dst) in self._edge_keys

    def is_initial(self, sid: int) -> bool:
        return sid in self._initial_set

    def successors(self, sid: int) -> list[Transition]:
        """Outgoing transitions of *sid* in canonical order (action, then target)."""
        if self._succ is None:
            succ: dict[int, list[Transition]] = {k: [] for k in self.states}
            for t in self.transitions:
                succ[t.src].append(t)
            for lst in succ.values():
                lst.sort(key=lambda t: (t.action.key, self.states[t.dst].canon))
            self._succ = succ
        return self._succ.get(sid, [])

    def validate(self) -> None:
        if not self.initial:
            raise GraphError("graph has no initial states")
        for sid in self.initial:
            if sid not in self.states:
                raise GraphError(f"initial state {sid} not in graph")
        for t in self.transitions:
            if t.src not in self.states or t.dst not in self.states:
                raise GraphError(f"dangling transition {t}")

    def __repr__(self):
        return (
            f"StateGraph(model={self.model!r}, states={len(self.states)}, "
            f"transitions={len(self.transitions)}, truncated={self.truncated})"
        )


@dataclass(frozen=True)
class TraceStep:
    action: Action
    post_state: State


@dataclass(frozen=True)
class Trace:
    """``s0, a1, s1, ..., an, sn`` stored as the initial state plus steps."""

    initial_state: State
    steps: tuple[TraceStep, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def actions(self) -> list[Action]:
        return [st.action for st in self.steps]

    @property
    def final_state(self) -> State:
        return self.steps[-1].post_state if self.steps else self.initial_state

    def state_before(self, i: int) -> State:
        return self.steps[i - 1].post_state if i > 0 else self.initial_state

    def __len__(self):
        return len(self.steps)


def action_matches(requested: Action, expected: Action, mode: str = "verify") -> bool:
    """``verify`` compares all fields; ``drive`` ignores the payload."""
    if mode == "verify":
        return requested.key == expected.key
    if mode == "drive":
        return (
            requested.kind is expected.kind
            and requested.name == expected.name
            and requested.node == expected.node
        )
    raise ValueError(f"unknown match mode {mode!r}")


@dataclass(frozen=True)
class Mismatch:
    var: str
    observed: CanonValue
    expected: CanonValue
    missing: bool = False

    def __str__(self):
        if self.missing:
            return f"{self.var}: not a model variable"
        return f"{self.var}: {canon_encode(self.observed).decode()}≠{canon_encode(self.expected).decode()}"


@dataclass(frozen=True)
class MatchResult:
    mismatches: tuple[Mismatch, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        return "ok" if self.ok else "; ".join(str(m) for m in self.mismatches)


def state_matches(
    observed: Mapping[str, CanonValue] | None, expected: Mapping[str, CanonValue]
) -> MatchResult:
    """Compare the variables *observed* reports against *expected*.

    Only observed variables are checked; model variables the implementation
    does not report are skipped.
    """
    if not observed:
        return MatchResult()
    bad = []
    for var in sorted(observed):
        val = observed[var]
        if var not in expected:
            bad.append(Mismatch(var, val, None, missing=True))
        elif canon_encode(val) != canon_encode(expected[var]):
            bad.append(Mismatch(var, val, expected[var]))
    return MatchResult(tuple(bad))


def as_state(v: State | Mapping[str, CanonValue] | None) -> State | None:
    if v is None or isinstance(v, State):
        return v
    return State(v)


def iter_pairs(trace: Trace) -> Iterable[tuple[State, Action, State]]:
    prev = trace.initial_state
    for st in trace.steps:
        yield prev, st.action, st.post_state
        prev = st.post_state
