"""Trace-driven deterministic testing for distributed systems.

Explore a model's state space, enumerate traces from the graph, and replay
each trace against an implementation whose action anchors let a player
force the trace's schedule.
"""

from .anchor import AnchorConfig, AnchorHandle, ReplayFail, anchor_init
from .canon import canon_decode, canon_encode
from .checker import ExploreBounds, Invariant, Model, Violation, explore
from .election import ElectionModel, builtin_model, inject_bug
from .graphfile import import_sqlite, read_graph, write_graph
from .model import Action, ActionKind, State, StateGraph, Trace, TraceStep, state_hash
from .player import Coordinator, Player, PlayerConfig, RunReport, serve
from .tracegen import TraceGenLimits, TraceSet, enumerate_traces, read_traces, write_traces

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionKind",
    "AnchorConfig",
    "AnchorHandle",
    "Coordinator",
    "ElectionModel",
    "ExploreBounds",
    "Invariant",
    "Model",
    "Player",
    "PlayerConfig",
    "ReplayFail",
    "RunReport",
    "State",
    "StateGraph",
    "Trace",
    "TraceGenLimits",
    "TraceSet",
    "TraceStep",
    "Violation",
    "anchor_init",
    "builtin_model",
    "canon_decode",
    "canon_encode",
    "enumerate_traces",
    "explore",
    "import_sqlite",
    "inject_bug",
    "read_graph",
    "read_traces",
    "serve",
    "state_hash",
    "write_graph",
    "write_traces",
]
