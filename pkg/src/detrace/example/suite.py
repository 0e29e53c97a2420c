"""Replays a trace file against the example election nodes, one player per trace."""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

from ..anchor import AnchorConfig, ReplayFail, anchor_init
from ..graphfile import FormatError, graph_digest, read_graph
from ..model import State, Trace, state_matches
from ..player import DEFAULT_STEP_TIMEOUT_MS, Player, RunReport
from ..tracegen import iter_traces, read_header
from ..wire import FAIL_REASONS
from .node import ElectionNode, MessageBus

log = logging.getLogger(__name__)


class SuiteSetupError(Exception):
    """The graph and trace files do not belong together, or cannot be read."""


@dataclass
class SuiteReport:
    reports: list[RunReport] = field(default_factory=list)
    graph_digest: int | None = None
    truncated: bool = False
    elapsed_ms: int = 0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> list[RunReport]:
        return [r for r in self.reports if not r.passed]

    @property
    def first_failure(self) -> RunReport | None:
        return next((r for r in self.reports if not r.passed), None)

    def summary(self) -> str:
        n, bad = len(self.reports), len(self.failures)
        head = f"{n - bad}/{n} traces passed"
        if self.truncated:
            head += " (trace set truncated)"
        first = self.first_failure
        if first is not None:
            head += f"; first failure: {first.summary()}"
        return head


def node_count_of(state: State) -> int:
    n = 0
    while f"role_{n + 1}" in state:
        n += 1
    return n


def _node_steps(trace: Trace, node_count: int) -> dict[int, int]:
    counts = {i: 0 for i in range(1, node_count + 1)}
    for a in trace.actions:
        counts[a.node] = counts.get(a.node, 0) + 1
    return counts


def run_trace(
    trace: Trace,
    node_count: int,
    *,
    trace_index: int = 0,
    buggy: bool = False,
    step_timeout_ms: int = DEFAULT_STEP_TIMEOUT_MS,
    slack_s: float = 5.0,
) -> RunReport:
    """Replay one trace against fresh nodes and return the player's verdict,
    tightened by a check of every node's final state."""
    player = Player(trace, trace_index=trace_index, step_timeout_ms=step_timeout_ms).start()
    bus = MessageBus(range(1, node_count + 1))
    nodes: list[ElectionNode] = []
    handles = []
    threads: list[threading.Thread] = []

    def on_error(node: ElectionNode, exc: BaseException) -> None:
        detail = exc.detail if isinstance(exc, ReplayFail) else f"crashed: {exc!r}"
        player.abort(_reason(exc), f"node {node.node}: {detail}", getattr(exc, "step_index", None))

    try:
        for i in range(1, node_count + 1):
            h = anchor_init(AnchorConfig(enabled=True, player_addr=player.addr_str, node=i))
            handles.append(h)
            node = ElectionNode(i, node_count, bus, h, buggy=buggy)
            node.on_error = on_error
            nodes.append(node)
        for node in nodes:
            threads += node.replay_tasks()
        for t in threads:
            t.start()

        budget = step_timeout_ms / 1000.0 * (len(trace) + 1) + slack_s
        report = player.wait(budget)
        if report is None:
            player.abort("timeout", f"trace did not finish within {budget:.1f} s")
            report = player.wait()
        assert report is not None
        if report.passed:
            report = _check_final(trace, nodes, report)
    finally:
        for node in nodes:
            node.request_stop()
        bus.stop()
        for h in handles:
            h.close()
        for node in nodes:
            node.stop()
        for t in threads:
            t.join(timeout=2)
        player.close()
    return report


def _check_final(trace: Trace, nodes: list[ElectionNode], report: RunReport) -> RunReport:
    # Atomic grants advance the player before the node has applied and
    # checked the step, so a pass only stands once every node caught up.
    last = max(len(trace) - 1, 0)
    steps = _node_steps(trace, len(nodes))
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:
        if any(n.error is not None for n in nodes):
            break
        if all(n.applied >= steps[n.node] for n in nodes):
            break
        time.sleep(0.001)
    errors = [(n, n.error) for n in nodes if n.error is not None]
    if errors:
        # the earliest step is the root cause; later ones are fallout
        node, exc = min(
            errors, key=lambda e: (getattr(e[1], "step_index", None) is None, getattr(e[1], "step_index", 0) or 0)
        )
        step = getattr(exc, "step_index", None)
        detail = exc.detail if isinstance(exc, ReplayFail) else repr(exc)
        return replace(
            report,
            status="fail",
            failed_step=last if step is None else step,
            reason=_reason(exc),
            detail=f"node {node.node}: {detail}",
            expected_action=trace.steps[step].action if step is not None else None,
        )
    for node in nodes:
        if node.applied < steps[node.node]:
            return replace(
                report,
                status="fail",
                failed_step=last,
                reason="timeout",
                detail=f"node {node.node} applied {node.applied} of {steps[node.node]} steps",
            )
        m = state_matches(node.snapshot(), trace.final_state)
        if not m.ok:
            return replace(
                report,
                status="fail",
                failed_step=last,
                reason="state_mismatch",
                detail=f"node {node.node} final state: {m.describe()}",
            )
    return report


def _reason(exc: BaseException) -> str:
    if isinstance(exc, ReplayFail) and exc.reason in FAIL_REASONS:
        return exc.reason
    return "protocol_error"


def run_suite(
    graph_file: str | os.PathLike,
    trace_file: str | os.PathLike,
    node_count: int | None = None,
    *,
    buggy: bool = False,
    step_timeout_ms: int = DEFAULT_STEP_TIMEOUT_MS,
    fail_fast: bool = False,
    limit: int | None = None,
    progress: Callable[[RunReport], None] | None = None,
) -> SuiteReport:
    """Replay every trace of *trace_file* in order.  The suite passes iff all do."""
    started = time.monotonic()
    try:
        graph = read_graph(graph_file)
        header = read_header(trace_file)
    except FormatError as exc:
        raise SuiteSetupError(str(exc)) from exc
    digest = graph_digest(graph)
    if header["graph_digest"] != digest:
        raise SuiteSetupError(
            f"{trace_file} was generated from graph {header['graph_digest']}, "
            f"but {graph_file} has digest {digest}"
        )
    if node_count is None:
        node_count = max((node_count_of(graph.states[s]) for s in graph.initial), default=0)
    out = SuiteReport(graph_digest=digest, truncated=bool(header.get("truncated")))
    try:
        for index, trace in iter_traces(trace_file):
            if limit is not None and index >= limit:
                break
            r = run_trace(
                trace,
                node_count,
                trace_index=index,
                buggy=buggy,
                step_timeout_ms=step_timeout_ms,
            )
            out.reports.append(r)
            if progress is not None:
                progress(r)
            if fail_fast and not r.passed:
                break
    except FormatError as exc:
        raise SuiteSetupError(str(exc)) from exc
    out.elapsed_ms = int((time.monotonic() - started) * 1000)
    return out


def run_election(
    node_count: int = 3,
    *,
    seed: int | None = None,
    timeout_s: float = 10.0,
) -> list[ElectionNode]:
    """Run nodes freely with anchors from the environment until one leads.

    Returns the nodes once a leader exists or *timeout_s* passes.
    """
    rng = random.Random(seed)
    bus = MessageBus(range(1, node_count + 1))
    stop = threading.Event()
    nodes = []
    for i in range(1, node_count + 1):
        h = anchor_init(AnchorConfig.from_env(node=i))
        nodes.append(ElectionNode(i, node_count, bus, h))
    threads = [
        threading.Thread(
            target=n.run_free, args=(stop, random.Random(rng.random())), daemon=True
        )
        for n in nodes
    ]
    for t in threads:
        t.start()
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if any(n.role == "leader" for n in nodes):
            break
        time.sleep(0.01)
    stop.set()
    bus.stop()
    for t in threads:
        t.join(timeout=2)
    for n in nodes:
        n.anchors.close()
    return nodes
