"""Depth-first trace enumeration over a state graph, and trace files."""

from __future__ import annotations

import os
import warnings
from collections.abc import Iterator
from dataclasses import dataclass, field

from .canon import canon_decode, canon_encode, encode_unchecked, ParseError
from .graphfile import FormatError, graph_digest
from .model import Action, State, StateGraph, Trace, TraceStep, state_hash

TRACES_FORMAT = "detrace-traces"
TRACES_VERSION = 1


class EmptyGraph(ValueError):
    pass


class DigestMismatch(UserWarning):
    """A trace file was generated from a different graph than the caller's."""


@dataclass(frozen=True)
class TraceGenLimits:
    max_depth: int = 64
    max_traces: int = 10_000
    dedup: bool = True

    def __post_init__(self):
        if self.max_depth < 1 or self.max_traces < 1:
            raise ValueError("max_depth and max_traces must be >= 1")


@dataclass
class TraceSet:
    graph_digest: int
    traces: list[Trace] = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.traces)


def enumerate_traces(graph: StateGraph, limits: TraceGenLimits | None = None) -> TraceSet:
    """Enumerate traces of *graph* by depth-first search.

    A trace ends at a state with no outgoing transitions, at ``max_depth``
    steps, or right after an edge that returns to a state already on the
    current path.  Children are visited in canonical action order.
    """
    limits = limits or TraceGenLimits()
    if not graph.initial:
        raise EmptyGraph("graph has no initial states")
    out = TraceSet(graph_digest(graph))
    seen: set[tuple[bytes, ...]] = set()
    states = graph.states

    def emit(root: int, path: list) -> bool:
        """Record the current path; False once the trace budget is spent."""
        if limits.dedup:
            key = (states[root].canon,) + tuple(t.action.key for t in path)
            if key in seen:
                return True
            seen.add(key)
        if len(out.traces) >= limits.max_traces:
            out.truncated = True
            return False
        steps = tuple(TraceStep(t.action, states[t.dst]) for t in path)
        out.traces.append(Trace(states[root], steps))
        return True

    for root in graph.initial:
        path: list = []
        on_path = {root}
        # stack of iterators over the children of each state on the path
        stack = [iter(graph.successors(root))]
        if not graph.successors(root):
            if not emit(root, path):
                return out
            continue
        while stack:
            if len(path) >= limits.max_depth:
                if not emit(root, path):
                    return out
                stack.pop()
                on_path.discard(path.pop().dst)
                continue
            t = next(stack[-1], None)
            if t is None:
                stack.pop()
                if path:
                    on_path.discard(path.pop().dst)
                continue
            path.append(t)
            if t.dst in on_path:
                ok = emit(root, path)
                path.pop()
                if not ok:
                    return out
                continue
            children = graph.successors(t.dst)
            if not children:
                ok = emit(root, path)
                path.pop()
                if not ok:
                    return out
                continue
            on_path.add(t.dst)
            stack.append(iter(children))
    return out


def validate_trace(trace: Trace, graph: StateGraph) -> bool:
    sid = state_hash(trace.initial_state)
    if not graph.is_initial(sid) or graph.states.get(sid) != trace.initial_state:
        return False
    for st in trace.steps:
        nid = state_hash(st.post_state)
        if graph.states.get(nid) != st.post_state:
            return False
        if not graph.has_transition(sid, st.action, nid):
            return False
        sid = nid
    return True


def _header(ts: TraceSet) -> bytes:
    return canon_encode(
        {
            "format": TRACES_FORMAT,
            "version": TRACES_VERSION,
            "graph_digest": ts.graph_digest,
            "truncated": ts.truncated,
        }
    )


def trace_line(index: int, trace: Trace) -> bytes:
    steps = b",".join(
        b'{"action":%s,"post":%s}' % (st.action.key, st.post_state.canon) for st in trace.steps
    )
    return b'{"index":%d,"initial":%s,"steps":[%s],"type":"trace"}' % (
        index,
        trace.initial_state.canon,
        steps,
    )


def write_traces(ts: TraceSet, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_header(ts) + b"\n")
        for i, tr in enumerate(ts.traces):
            f.write(trace_line(i, tr) + b"\n")


class _Interner:
    """Shares State objects between traces read from one file."""

    def __init__(self):
        self._cache: dict[bytes, State] = {}

    def state(self, vars_) -> State:
        if not isinstance(vars_, dict):
            raise FormatError("state is not a map")
        canon = encode_unchecked(vars_)
        s = self._cache.get(canon)
        if s is None:
            s = self._cache[canon] = State._trusted(vars_, canon)
        return s


def _parse_header(line: bytes, path) -> dict:
    try:
        h = canon_decode(line)
    except ParseError as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if not isinstance(h, dict) or h.get("format") != TRACES_FORMAT:
        raise FormatError(f"{path}: not a trace file")
    if h.get("version") != TRACES_VERSION:
        raise FormatError(f"{path}: unsupported trace file version {h.get('version')!r}")
    if not isinstance(h.get("graph_digest"), int):
        raise FormatError(f"{path}: header lacks graph_digest")
    return h


def _parse_trace(line: bytes, lineno: int, path, interner: _Interner) -> Trace:
    try:
        rec = canon_decode(line)
        if rec.get("type") != "trace":
            raise FormatError(f"{path}:{lineno}: expected a trace record")
        steps = tuple(
            TraceStep(Action.from_canon(st["action"]), interner.state(st["post"]))
            for st in rec["steps"]
        )
        return Trace(interner.state(rec["initial"]), steps)
    except FormatError:
        raise
    except (ParseError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"{path}:{lineno}: bad trace record: {exc}") from None


def read_header(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as f:
            return _parse_header(f.readline(), path)
    except OSError as exc:
        raise FormatError(f"cannot read trace file {path}: {exc}") from exc


def iter_traces(path: str | os.PathLike) -> Iterator[tuple[int, Trace]]:
    """Stream ``(index, trace)`` pairs without holding the whole file."""
    interner = _Interner()
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot read trace file {path}: {exc}") from exc
    with f:
        _parse_header(f.readline(), path)
        for n, line in enumerate(f, 2):
            if line.strip():
                yield n - 2, _parse_trace(line, n, path, interner)


def load_trace(path: str | os.PathLike, index: int) -> Trace:
    """Read the single trace at *index*; IndexError if there is none."""
    if index < 0:
        raise IndexError(index)
    with open(path, "rb") as f:
        _parse_header(f.readline(), path)
        for n, line in enumerate(f):
            if n == index:
                return _parse_trace(line, n + 2, path, _Interner())
    raise IndexError(f"trace index {index} out of range")


def read_traces(path: str | os.PathLike, expected_digest: int | None = None) -> TraceSet:
    """Read a trace file.

    If *expected_digest* is given and differs from the header, a
    :class:`DigestMismatch` warning is issued; callers that must refuse stale
    traces should compare ``graph_digest`` themselves.
    """
    header = read_header(path)
    ts = TraceSet(header["graph_digest"], [t for _, t in iter_traces(path)], bool(header.get("truncated")))
    if expected_digest is not None and expected_digest != ts.graph_digest:
        warnings.warn(
            DigestMismatch(
                f"{path}: traces were generated from graph {ts.graph_digest}, not {expected_digest}"
            ),
            stacklevel=2,
        )
    return ts


def trace_count(path: str | os.PathLike) -> int:
    read_header(path)
    with open(path, "rb") as f:
        next(f)
        return sum(1 for line in f if line.strip())
