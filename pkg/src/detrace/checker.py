"""Breadth-first explicit-state exploration of programmatic protocol models."""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from .model import Action, State, StateGraph, state_hash

log = logging.getLogger(__name__)

DEFAULT_MAX_STATES = 100_000


class ModelError(RuntimeError):
    """The model misbehaved: ``next`` raised or emitted something malformed."""


@dataclass(frozen=True)
class Invariant:
    name: str
    check: Callable[[State], bool]


class Model:
    """A protocol model given as code.

    ``init()`` yields the initial states; ``next(state)`` returns every
    enabled ``(action, successor)`` pair and must be a pure function of its
    argument.
    """

    def __init__(
        self,
        name: str,
        init: Callable[[], Iterable[State]],
        next: Callable[[State], Sequence[tuple[Action, State]]],
        invariants: Sequence[Invariant] = (),
    ):
        self.name = name
        self.init = init
        self.next = next
        self.invariants = tuple(invariants)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


@dataclass(frozen=True)
class ExploreBounds:
    max_states: int = DEFAULT_MAX_STATES
    max_depth: int | None = None

    def __post_init__(self):
        if self.max_states < 1:
            raise ValueError("max_states must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")


@dataclass(frozen=True)
class Violation:
    invariant_name: str
    state: State
    initial: State
    path: tuple[tuple[Action, State], ...] = field(default=())

    def describe(self) -> str:
        lines = [f"invariant {self.invariant_name} violated after {len(self.path)} step(s)"]
        lines.append(f"  init  {self.initial.canon.decode()}")
        for i, (a, s) in enumerate(self.path, 1):
            lines.append(f"  {i:>4}  {a}")
        lines.append(f"  state {self.state.canon.decode()}")
        return "\n".join(lines)


def _checked_successors(model: Model, s: State) -> list[tuple[Action, State]]:
    try:
        succ = list(model.next(s))
    except Exception as exc:
        raise ModelError(f"{model.name}: next() failed on {s!r}: {exc}") from exc
    for item in succ:
        if (
            not isinstance(item, tuple)
            or len(item) != 2
            or not isinstance(item[0], Action)
            or not isinstance(item[1], State)
        ):
            raise ModelError(f"{model.name}: next() emitted malformed successor {item!r}")
    succ.sort(key=lambda p: (p[0].key, p[1].canon))
    return succ


def explore(
    model: Model, bounds: ExploreBounds | None = None
) -> tuple[StateGraph, list[Violation]]:
    """Explore *model* breadth-first and return its state graph and violations.

    Successors are visited in canonical action order so the resulting graph
    (and its file) is byte-identical across runs.  When ``max_states`` is hit
    the graph is flagged ``truncated`` and only edges between already
    discovered states are kept; states at ``max_depth`` are not expanded.
    """
    bounds = bounds or ExploreBounds()
    graph = StateGraph(model.name)
    violations: list[Violation] = []
    parent: dict[int, tuple[int, Action] | None] = {}
    depth: dict[int, int] = {}
    frontier: deque[int] = deque()

    def path_to(sid: int) -> tuple[State, tuple[tuple[Action, State], ...]]:
        steps = []
        while parent[sid] is not None:
            psid, act = parent[sid]
            steps.append((act, graph.states[sid]))
            sid = psid
        steps.reverse()
        return graph.states[sid], tuple(steps)

    def check(sid: int) -> None:
        s = graph.states[sid]
        for inv in model.invariants:
            try:
                ok = inv.check(s)
            except Exception as exc:
                raise ModelError(f"invariant {inv.name} raised on {s!r}: {exc}") from exc
            if not ok:
                init, steps = path_to(sid)
                violations.append(Violation(inv.name, s, init, steps))

    try:
        inits = sorted({s.canon: s for s in model.init()}.values(), key=lambda s: s.canon)
    except Exception as exc:
        raise ModelError(f"{model.name}: init() failed: {exc}") from exc
    if not inits:
        raise ModelError(f"{model.name}: no initial states")
    for s in inits:
        if not isinstance(s, State):
            raise ModelError(f"{model.name}: init() emitted non-state {s!r}")
        if len(graph.states) >= bounds.max_states:
            graph.truncated = True
            break
        sid, _ = graph.add_state(s, initial=True)
        parent[sid] = None
        depth[sid] = 0
        frontier.append(sid)
        check(sid)

    while frontier:
        sid = frontier.popleft()
        succ = _checked_successors(model, graph.states[sid])
        if bounds.max_depth is not None and depth[sid] >= bounds.max_depth:
            if succ:
                graph.truncated = True
            continue
        for action, nxt in succ:
            nid = state_hash(nxt)
            if nid not in graph.states:
                if len(graph.states) >= bounds.max_states:
                    graph.truncated = True
                    continue
                graph.add_state(nxt)
                parent[nid] = (sid, action)
                depth[nid] = depth[sid] + 1
                frontier.append(nid)
                check(nid)
            else:
                graph.add_state(nxt)  # collision check only
            graph.add_transition(sid, action, nid)

    log.debug("explored %r: %s, %d violation(s)", model, graph, len(violations))
    return graph, violations


def replay_path(model: Model, initial: State, actions: Sequence[Action]) -> State:
    """Follow *actions* from *initial* through ``model.next``; raises KeyError
    if some action is not enabled."""
    s = initial
    for a in actions:
        for act, nxt in model.next(s):
            if act == a:
                s = nxt
                break
        else:
            raise KeyError(f"{a} not enabled in {s!r}")
    return s
