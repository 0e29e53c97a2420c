from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from detrace.model import Action, ActionKind, State, StateGraph, Trace, TraceStep  # noqa: E402


def st(**vars_) -> State:
    return State(vars_)


def act(name: str, node: int = 1, payload=None, kind=ActionKind.INTERNAL) -> Action:
    return Action(kind, name, node, payload)


def out(name: str, node: int = 1, payload=None) -> Action:
    return Action(ActionKind.OUTPUT, name, node, payload)


def inp(name: str, node: int = 1, payload=None) -> Action:
    return Action(ActionKind.INPUT, name, node, payload)


def make_graph(edges, initial=("s0",), model="test") -> StateGraph:
    """Graph over states ``{"n": name}`` from ``(src, label, dst)`` names.

    Labels become output actions at node 1.
    """
    g = StateGraph(model)
    ids = {}

    def sid(name, init=False):
        if name not in ids:
            ids[name], _ = g.add_state(st(n=name), initial=init)
        return ids[name]

    for name in initial:
        sid(name, True)
    for a, lab, b in edges:
        g.add_transition(sid(a), out(lab), sid(b))
    return g


def dag_graph(n: int, roots, edges) -> StateGraph:
    """Graph over states ``{"v": i}`` for the tuples built by ``oracles.random_dag``."""
    g = StateGraph("dag")
    ids = [g.add_state(st(v=v), initial=v in roots)[0] for v in range(n)]
    for a, lab, b in edges:
        g.add_transition(ids[a], out(lab), ids[b])
    return g


def make_trace(*actions: Action) -> Trace:
    """A trace whose post-states number the steps: ``{"k": i}``."""
    return Trace(st(k=0), tuple(TraceStep(a, st(k=i + 1)) for i, a in enumerate(actions)))


@pytest.fixture
def diamond() -> StateGraph:
    return make_graph([("s0", "a", "s1"), ("s0", "b", "s2"), ("s1", "c", "s3"), ("s2", "c", "s3")])


@pytest.fixture
def two_cycle() -> StateGraph:
    return make_graph([("s0", "a", "s1"), ("s1", "b", "s0")])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
