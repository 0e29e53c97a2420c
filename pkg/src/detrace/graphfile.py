"""Line-oriented state-graph files and the relational importer.

::

    {"format":"detrace-graph","model":"election","truncated":false,"version":1}
    {"id":123,"initial":true,"type":"state","vars":{...}}
    ...
    {"action":{...},"from":123,"to":456,"type":"transition"}

Every line is one canonically encoded record.  States come first in
discovery order, then transitions in discovery order.
"""

from __future__ import annotations

import os
import sqlite3
from collections.abc import Iterable
from pathlib import Path

from .canon import ParseError, canon_decode, canon_encode, encode_unchecked, hash64
from .model import Action, HashCollision, State, StateGraph, state_hash

GRAPH_FORMAT = "detrace-graph"
GRAPH_VERSION = 1
_DIGEST_PERSON = b"detrace.graph"


class FormatError(ValueError):
    """A graph or trace file is malformed or of an unsupported version."""


def graph_lines(graph: StateGraph) -> Iterable[bytes]:
    yield canon_encode(
        {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "model": graph.model,
            "truncated": graph.truncated,
        }
    )
    for sid, s in graph.states.items():
        yield b'{"id":%d,"initial":%s,"type":"state","vars":%s}' % (
            sid,
            b"true" if graph.is_initial(sid) else b"false",
            s.canon,
        )
    for t in graph.transitions:
        yield b'{"action":%s,"from":%d,"to":%d,"type":"transition"}' % (
            t.action.key,
            t.src,
            t.dst,
        )


def graph_bytes(graph: StateGraph) -> bytes:
    return b"".join(line + b"\n" for line in graph_lines(graph))


def digest_bytes(data: bytes) -> int:
    return hash64(data, person=_DIGEST_PERSON)


def graph_digest(graph: StateGraph) -> int:
    """64-bit digest of the graph's canonical file bytes."""
    return digest_bytes(graph_bytes(graph))


def file_digest(path: str | os.PathLike) -> int:
    return digest_bytes(Path(path).read_bytes())


def write_graph(graph: StateGraph, path: str | os.PathLike) -> int:
    """Write *graph* to *path*; returns its digest."""
    data = graph_bytes(graph)
    Path(path).write_bytes(data)
    return digest_bytes(data)


def _record(line: bytes, lineno: int, path) -> dict:
    try:
        rec = canon_decode(line)
    except ParseError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not isinstance(rec, dict):
        raise FormatError(f"{path}:{lineno}: record is not a map")
    return rec


def parse_graph(data: bytes, path="<graph>") -> StateGraph:
    lines = data.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty graph file")
    header = _record(lines[0], 1, path)
    if header.get("format") != GRAPH_FORMAT:
        raise FormatError(f"{path}: not a graph file (format={header.get('format')!r})")
    if header.get("version") != GRAPH_VERSION:
        raise FormatError(f"{path}: unsupported graph version {header.get('version')!r}")
    graph = StateGraph(str(header.get("model", "")))
    graph.truncated = bool(header.get("truncated", False))
    pending: list[tuple[int, int, Action, int]] = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        rec = _record(line, n, path)
        kind = rec.get("type")
        try:
            if kind == "state":
                vars_ = rec["vars"]
                if not isinstance(vars_, dict):
                    raise FormatError(f"{path}:{n}: vars is not a map")
                s = State._trusted(vars_, encode_unchecked(vars_))
                if state_hash(s) != rec["id"]:
                    raise FormatError(f"{path}:{n}: state id does not match its content hash")
                graph.add_state(s, initial=bool(rec.get("initial", False)))
            elif kind == "transition":
                pending.append((n, rec["from"], Action.from_canon(rec["action"]), rec["to"]))
            else:
                raise FormatError(f"{path}:{n}: unknown record type {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{n}: bad record: {exc}") from None
    for n, src, action, dst in pending:
        if src not in graph.states or dst not in graph.states:
            raise FormatError(f"{path}:{n}: transition endpoint not a known state")
        graph.add_transition(src, action, dst)
    return graph


def read_graph(path: str | os.PathLike) -> StateGraph:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read graph file {path}: {exc}") from exc
    return parse_graph(data, path)


def import_sqlite(db_path: str | os.PathLike, model: str = "") -> StateGraph:
    """Load a graph from a database with tables ``state(id, json)`` and
    ``transition(from_id, action_json, to_id)``.

    ``state.json`` holds a state record (``{"initial":..,"vars":{..}}``; the
    ``id``/``type`` keys are optional).  Database ids are arbitrary and are
    remapped to content-hash StateIds.
    """
    con = sqlite3.connect(f"file:{os.fspath(db_path)}?mode=ro", uri=True)
    try:
        graph = StateGraph(model)
        idmap: dict = {}
        for row_id, js in con.execute("SELECT id, json FROM state ORDER BY rowid"):
            rec = canon_decode(js)
            if "vars" not in rec:
                raise FormatError(f"state row {row_id}: missing vars")
            sid, _ = graph.add_state(State(rec["vars"]), initial=bool(rec.get("initial")))
            idmap[row_id] = sid
        for src, ajs, dst in con.execute(
            "SELECT from_id, action_json, to_id FROM transition ORDER BY rowid"
        ):
            if src not in idmap or dst not in idmap:
                raise FormatError(f"transition {src}->{dst}: unknown state id")
            graph.add_transition(idmap[src], Action.from_canon(canon_decode(ajs)), idmap[dst])
    except sqlite3.Error as exc:
        raise FormatError(f"{db_path}: {exc}") from exc
    except HashCollision:
        raise
    finally:
        con.close()
    return graph


def export_sqlite(graph: StateGraph, db_path: str | os.PathLike) -> None:
    con = sqlite3.connect(os.fspath(db_path))
    try:
        with con:
            con.execute("CREATE TABLE state (id INTEGER NOT NULL UNIQUE, json TEXT NOT NULL)")
            con.execute(
                "CREATE TABLE transition (from_id INTEGER, action_json TEXT, to_id INTEGER)"
            )
            for sid, s in graph.states.items():
                rec = {"type": "state", "id": sid, "initial": graph.is_initial(sid), "vars": s.to_dict()}
                con.execute("INSERT INTO state VALUES (?, ?)", (sid, canon_encode(rec).decode()))
            con.executemany(
                "INSERT INTO transition VALUES (?, ?, ?)",
                [(t.src, t.action.key.decode(), t.dst) for t in graph.transitions],
            )
    finally:
        con.close()
