"""Example system: an anchored leader-election implementation and its test runner."""

from .node import ElectionNode, MessageBus, NodeStopped, run_node
from .suite import SuiteReport, SuiteSetupError, run_election, run_suite, run_trace

__all__ = [
    "ElectionNode",
    "MessageBus",
    "NodeStopped",
    "SuiteReport",
    "SuiteSetupError",
    "run_election",
    "run_node",
    "run_suite",
    "run_trace",
]
