"""A small leader-election implementation instrumented with action anchors.

The node mirrors :class:`detrace.election.ElectionModel` action for action.
It can run two ways:

* free (anchors disabled): an event loop with randomized election timeouts,
  the way the code would run in production;
* replay (anchors enabled): one task per modelled action stream, each
  repeatedly asking the player for permission.  The player decides which
  task goes next, so the schedule is exactly the trace's.

Grants on different connections can race, so a granted task waits until
every earlier step of its node (per ``Grant.node_seq``) has been applied
before touching node state.
"""

from __future__ import annotations

import random
import threading
from collections.abc import Callable
from contextlib import contextmanager

from ..anchor import (
    AnchorHandle,
    ConnectionLost,
    ReplayFail,
    TraceComplete,
)
from ..election import CANDIDATE, FOLLOWER, LEADER, node_vars

Message = dict


class NodeStopped(Exception):
    pass


class MessageBus:
    """Per-node inboxes.  Imposes no ordering; replay picks messages by content."""

    def __init__(self, nodes):
        self._cv = threading.Condition()
        self._inbox: dict[int, list[Message]] = {i: [] for i in nodes}
        self._stopped = False
        self.sent = 0

    def send(self, msg: Message) -> None:
        with self._cv:
            self._inbox[msg["to"]].append(dict(msg))
            self.sent += 1
            self._cv.notify_all()

    def take(self, node: int, match: Callable[[Message], bool], timeout: float | None = None) -> Message:
        """Remove and return the first message for *node* satisfying *match*,
        waiting for it to arrive."""
        with self._cv:
            found: list[Message] = []

            def ready():
                if self._stopped:
                    return True
                for k, m in enumerate(self._inbox[node]):
                    if match(m):
                        found.append(self._inbox[node].pop(k))
                        return True
                return False

            if not self._cv.wait_for(ready, timeout):
                raise TimeoutError(f"no matching message for node {node}")
            if not found:
                raise NodeStopped()
            return found[0]

    def recv(self, node: int, timeout: float) -> Message | None:
        try:
            return self.take(node, lambda m: True, timeout)
        except TimeoutError:
            return None

    def pending(self, node: int) -> list[Message]:
        with self._cv:
            return list(self._inbox[node])

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify_all()


class ElectionNode:
    def __init__(
        self,
        node: int,
        node_count: int,
        bus: MessageBus,
        anchors: AnchorHandle,
        *,
        buggy: bool = False,
        delivery_timeout: float = 2.0,
    ):
        self.node = node
        self.node_count = node_count
        self.peers = [j for j in range(1, node_count + 1) if j != node]
        self.bus = bus
        self.anchors = anchors
        self.buggy = buggy
        self.delivery_timeout = delivery_timeout
        self.term = 0
        self.voted_for: int | None = None
        self.role = FOLLOWER
        self.votes: set[int] = set()
        self.rv_sent: set[int] = set()
        self.applied = 0
        self.error: BaseException | None = None
        self.on_error: Callable[[ElectionNode, BaseException], None] | None = None
        self._cv = threading.Condition()
        self._stopped = False

    def __repr__(self):
        return f"ElectionNode({self.node}, term={self.term}, role={self.role})"

    def observed(self) -> dict:
        t, v, r = node_vars(self.node)
        return {t: self.term, v: self.voted_for, r: self.role}

    def snapshot(self) -> dict:
        with self._cv:
            return self.observed()

    # -- step ordering -----------------------------------------------------

    @contextmanager
    def _step(self):
        """Hold the node for one action, in trace order when replaying."""
        grant = self.anchors.last_grant if self.anchors.enabled else None
        with self._cv:
            if grant is not None and grant.node_seq is not None:
                self._cv.wait_for(lambda: self._stopped or self.applied == grant.node_seq)
            if self._stopped:
                raise NodeStopped()
            yield
            self.applied += 1
            self._cv.notify_all()

    def wait_applied(self, count: int, timeout: float) -> bool:
        with self._cv:
            return self._cv.wait_for(
                lambda: self._stopped or self.error is not None or self.applied >= count, timeout
            )

    def request_stop(self) -> None:
        """Flag the node stopped without taking its lock (which a task
        blocked in an anchor or on the bus may hold)."""
        self._stopped = True

    def stop(self) -> None:
        self._stopped = True
        with self._cv:
            self._cv.notify_all()

    @property
    def stopped(self) -> bool:
        return self._stopped

    def _require(self, cond: bool, what: str) -> None:
        if not cond:
            raise ReplayFail("state_mismatch", f"node {self.node} cannot {what} in {self.observed()}")

    def _deliver(self, kind: str, match: Callable[[Message], bool], payload) -> Message:
        """Take the physical message a drive-mode grant refers to.

        Done before entering the step: the sender may still be applying
        its own (earlier) step, and waiting must not hold this node.
        """
        try:
            return self.bus.take(
                self.node, lambda m: m["type"] == kind and match(m), self.delivery_timeout
            )
        except TimeoutError:
            grant = self.anchors.last_grant
            raise ReplayFail(
                "timeout",
                f"node {self.node} never received the {kind} message {payload}",
                step_index=grant.step_index if grant else None,
            ) from None

    def _step_down(self, term: int) -> None:
        self.term = term
        self.role = FOLLOWER
        self.voted_for = None
        self.votes = set()
        self.rv_sent = set()

    # -- actions -----------------------------------------------------------

    def timeout(self) -> None:
        a = self.anchors
        a.begin_internal("Timeout")
        with self._step():
            self._require(self.role != LEADER, "time out as leader")
            self.term += 1
            self.role = CANDIDATE
            self.voted_for = self.node
            self.votes = {self.node}
            self.rv_sent = set()
            a.end_internal("Timeout", self.observed())

    def request_vote(self, to: int) -> None:
        a = self.anchors
        a.output("RequestVote", {"to": to})
        with self._step():
            self._require(self.role == CANDIDATE and to not in self.rv_sent, f"ask {to} for a vote")
            self.rv_sent.add(to)
            self.bus.send({"type": "rv", "from": self.node, "to": to, "term": self.term})
            a.verify_state(self.observed())

    def become_leader(self) -> None:
        a = self.anchors
        a.begin_internal("BecomeLeader")
        with self._step():
            self._require(
                self.role == CANDIDATE and 2 * len(self.votes) > self.node_count, "become leader"
            )
            self.role = LEADER
            a.end_internal("BecomeLeader", self.observed())

    def handle_request_vote(self, msg: Message | None = None) -> None:
        """Handle a vote request: *msg* if given, else the one the player names."""
        a = self.anchors
        if msg is None:
            p = a.input("HandleRequestVote")
            msg = self._deliver(
                "rv", lambda m: m["from"] == p["from"] and m["term"] == p["term"], p
            )
        else:
            a.input("HandleRequestVote", {"from": msg["from"], "term": msg["term"]})
        with self._step():
            cand, t = msg["from"], msg["term"]
            if t > self.term:
                self._step_down(t)
            grant = t == self.term and (self.buggy or self.voted_for in (None, cand))
            if grant:
                self.voted_for = cand
            self.bus.send(
                {"type": "rvr", "from": self.node, "to": cand, "term": self.term, "granted": grant}
            )
            a.verify_state(self.observed())

    def handle_vote_resp(self, msg: Message | None = None) -> None:
        a = self.anchors
        if msg is None:
            p = a.input("HandleVoteResp")
            msg = self._deliver(
                "rvr",
                lambda m: (m["from"], m["term"], m["granted"])
                == (p["from"], p["term"], p["granted"]),
                p,
            )
        else:
            a.input(
                "HandleVoteResp",
                {"from": msg["from"], "term": msg["term"], "granted": msg["granted"]},
            )
        with self._step():
            t = msg["term"]
            if t > self.term:
                self._step_down(t)
            elif t == self.term and self.role == CANDIDATE and msg["granted"]:
                self.votes.add(msg["from"])
            a.verify_state(self.observed())

    def handle(self, msg: Message) -> None:
        if msg["type"] == "rv":
            self.handle_request_vote(msg)
        else:
            self.handle_vote_resp(msg)

    # -- drivers -----------------------------------------------------------

    def _loop(self, action: Callable[[], None]) -> None:
        try:
            while not self._stopped:
                action()
        except (TraceComplete, NodeStopped):
            pass
        except ConnectionLost as exc:
            if not self._stopped:
                self._record(exc)
        except BaseException as exc:  # noqa: BLE001 - reported to the harness
            self._record(exc)

    def _record(self, exc: BaseException) -> None:
        with self._cv:
            first = self.error is None
            if first:
                self.error = exc
                self._cv.notify_all()
        if first and self.on_error is not None:
            self.on_error(self, exc)

    def replay_tasks(self) -> list[threading.Thread]:
        """One thread per action stream; each asks the player for its next turn."""
        streams: list[tuple[str, Callable[[], None]]] = [
            ("timeout", self.timeout),
            ("leader", self.become_leader),
            ("rv-in", self.handle_request_vote),
            ("rvr-in", self.handle_vote_resp),
        ]
        streams += [(f"rv-to-{j}", lambda j=j: self.request_vote(j)) for j in self.peers]
        return [
            threading.Thread(
                target=self._loop, args=(fn,), name=f"node{self.node}-{tag}", daemon=True
            )
            for tag, fn in streams
        ]

    def run_free(
        self,
        stop: threading.Event,
        rng: random.Random | None = None,
        timeout_range: tuple[float, float] = (0.05, 0.15),
    ) -> None:
        """Event loop for normal operation: time out when no message arrives
        within a randomized election timeout."""
        rng = rng or random.Random()
        try:
            while not stop.is_set() and not self._stopped:
                msg = self.bus.recv(self.node, rng.uniform(*timeout_range))
                if msg is not None:
                    self.handle(msg)
                elif self.role != LEADER:
                    self.timeout()
                    for j in self.peers:
                        self.request_vote(j)
                if self.role == CANDIDATE and 2 * len(self.votes) > self.node_count:
                    self.become_leader()
        except NodeStopped:
            pass
        except BaseException as exc:  # noqa: BLE001
            self._record(exc)


def run_node(
    node: ElectionNode,
    anchors: AnchorHandle | None = None,
    *,
    stop: threading.Event | None = None,
    rng: random.Random | None = None,
) -> None:
    """Run *node* until stopped (free mode) or until the trace ends (replay)."""
    if anchors is not None:
        node.anchors = anchors
    if node.anchors.enabled:
        tasks = node.replay_tasks()
        for t in tasks:
            t.start()
        for t in tasks:
            t.join()
    else:
        node.run_free(stop or threading.Event(), rng)
