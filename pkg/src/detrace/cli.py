"""``detrace`` command line: model check, generate traces, replay.

Exit codes: 0 success, 1 a check or replay failed, 2 usage or I/O error.
"""

from __future__ import annotations

import logging
import sys
import tempfile
from pathlib import Path

import click

from .canon import canon_encode
from .checker import DEFAULT_MAX_STATES, ExploreBounds, ModelError, explore
from .election import BadParams, UnknownModel, builtin_model
from .graphfile import FormatError, import_sqlite, read_graph, write_graph
from .player import ConfigError, PlayerConfig, serve
from .tracegen import EmptyGraph, TraceGenLimits, enumerate_traces, write_traces

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Group(click.Group):
    def main(self, *args, **kwargs):
        # click uses 2 for usage errors already; keep I/O errors on 2 as well
        try:
            return super().main(*args, **kwargs)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)


def _die(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_USAGE)


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int) -> None:
    """Trace-driven deterministic testing for distributed systems."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _check_model(model_name, nodes, max_term, buggy, max_states, max_depth, out):
    try:
        model = builtin_model(model_name, {"node_count": nodes, "max_term": max_term, "buggy": buggy})
        bounds = ExploreBounds(max_states=max_states, max_depth=max_depth)
    except UnknownModel:
        _die(f"unknown model {model_name!r}")
    except (BadParams, ValueError) as exc:
        _die(str(exc))
    try:
        graph, violations = explore(model, bounds)
    except ModelError as exc:
        _die(str(exc))
    digest = write_graph(graph, out)
    return graph, violations, digest


@main.command("check-model")
@click.option("--model", "model_name", default="election", show_default=True)
@click.option("--nodes", type=int, default=3, show_default=True)
@click.option("--max-term", type=int, default=1, show_default=True)
@click.option("--buggy", is_flag=True, help="Explore the double-vote variant.")
@click.option("--max-states", type=int, default=DEFAULT_MAX_STATES, show_default=True)
@click.option("--max-depth", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Graph file to write.")
def check_model(model_name, nodes, max_term, buggy, max_states, max_depth, out):
    """Explore a builtin model and write its state graph."""
    graph, violations, digest = _check_model(
        model_name, nodes, max_term, buggy, max_states, max_depth, out
    )
    click.echo(f"states: {len(graph.states)}")
    click.echo(f"transitions: {len(graph.transitions)}")
    click.echo(f"truncated: {str(graph.truncated).lower()}")
    click.echo(f"violations: {len(violations)}")
    click.echo(f"graph digest: {digest}")
    if violations:
        click.echo("")
        click.echo(violations[0].describe())
        sys.exit(EXIT_FAIL)


def _tracegen(graph_path, sqlite, out, max_depth, max_traces, dedup):
    try:
        graph = import_sqlite(graph_path) if sqlite else read_graph(graph_path)
        limits = TraceGenLimits(max_depth=max_depth, max_traces=max_traces, dedup=dedup)
        ts = enumerate_traces(graph, limits)
    except (FormatError, EmptyGraph, ValueError) as exc:
        _die(str(exc))
    write_traces(ts, out)
    return ts


@main.command()
@click.option("--graph", "graph_path", type=click.Path(dir_okay=False), required=True)
@click.option("--sqlite", is_flag=True, help="Read the graph from a relational database file.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Trace file to write.")
@click.option("--max-depth", type=int, default=64, show_default=True)
@click.option("--max-traces", type=int, default=10_000, show_default=True)
@click.option("--dedup/--no-dedup", default=True, show_default=True)
def tracegen(graph_path, sqlite, out, max_depth, max_traces, dedup):
    """Enumerate traces of a state graph."""
    ts = _tracegen(graph_path, sqlite, out, max_depth, max_traces, dedup)
    click.echo(f"traces: {len(ts)}")
    click.echo(f"truncated: {str(ts.truncated).lower()}")


@main.command()
@click.option("--traces", "trace_file", type=click.Path(dir_okay=False), required=True)
@click.option("--trace-index", type=int, default=0, show_default=True)
@click.option("--listen", default="127.0.0.1:9000", show_default=True)
@click.option("--timeout-ms", type=int, default=10_000, show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
def player(trace_file, trace_index, listen, timeout_ms, report_path):
    """Serve one trace to anchored clients until it passes or fails."""
    try:
        config = PlayerConfig(
            trace_file=trace_file,
            trace_index=trace_index,
            listen_addr=listen,
            step_timeout_ms=timeout_ms,
            report_path=report_path,
        )

        def announce(p):
            click.echo(f"listening on {p.addr_str}")

        report = serve(config, on_listen=announce)
    except (ConfigError, FormatError) as exc:
        _die(str(exc))
    click.echo(report.summary())
    sys.exit(EXIT_OK if report.passed else EXIT_FAIL)


@main.command("run-example")
@click.option("--graph", "graph_path", type=click.Path(dir_okay=False))
@click.option("--traces", "trace_file", type=click.Path(dir_okay=False))
@click.option("--fresh", is_flag=True, help="Regenerate graph and traces first.")
@click.option("--nodes", type=int, default=3, show_default=True)
@click.option("--max-term", type=int, default=1, show_default=True)
@click.option("--max-traces", type=int, default=10_000, show_default=True)
@click.option("--inject-bug", is_flag=True, help="Run the double-vote implementation.")
@click.option("--timeout-ms", type=int, default=10_000, show_default=True)
@click.option("--limit", type=int, default=None, help="Replay only the first N traces.")
@click.option("--fail-fast", is_flag=True)
@click.option("--quiet", "-q", is_flag=True, help="Print failing traces only.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
def run_example(
    graph_path,
    trace_file,
    fresh,
    nodes,
    max_term,
    max_traces,
    inject_bug,
    timeout_ms,
    limit,
    fail_fast,
    quiet,
    report_path,
):
    """Replay a trace set against the example election nodes."""
    from .example import SuiteSetupError, run_suite

    tmp = None
    if fresh:
        tmp = tempfile.TemporaryDirectory(prefix="detrace-")
        work = Path(tmp.name)
        graph_path = graph_path or str(work / "graph.jsonl")
        trace_file = trace_file or str(work / "traces.jsonl")
        _, violations, _ = _check_model("election", nodes, max_term, False, DEFAULT_MAX_STATES, None, graph_path)
        if violations:
            _die("model has invariant violations; not replaying")
        _tracegen(graph_path, False, trace_file, 64, max_traces, True)
    elif not graph_path or not trace_file:
        _die("give --graph and --traces, or --fresh")

    def progress(r):
        if not quiet or not r.passed:
            click.echo(r.summary())

    try:
        suite = run_suite(
            graph_path,
            trace_file,
            buggy=inject_bug,
            step_timeout_ms=timeout_ms,
            fail_fast=fail_fast,
            limit=limit,
            progress=progress,
        )
    except SuiteSetupError as exc:
        _die(str(exc))
    finally:
        if tmp is not None:
            tmp.cleanup()
    click.echo(suite.summary())
    if report_path:
        with open(report_path, "wb") as f:
            for r in suite.reports:
                f.write(canon_encode(r.to_canon()) + b"\n")
    sys.exit(EXIT_OK if suite.passed else EXIT_FAIL)


if __name__ == "__main__":
    main()
