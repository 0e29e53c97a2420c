"""Builtin leader-election model (Raft voting phase).

State variables, for every node ``i`` in ``1..node_count``:

``term_i``
    current term.
``voted_for_i``
    node voted for in ``term_i`` or ``null``.
``role_i``
    ``"follower"``, ``"candidate"`` or ``"leader"``.
``votes_i``
    sorted list of nodes that granted ``i`` a vote in ``term_i``.
``rv_sent_i``
    sorted list of peers ``i`` already sent a vote request in ``term_i``.

plus ``msgs``, the in-flight message multiset as a list sorted by canonical
encoding.  Any message may be delivered next; nothing is lost or duplicated.

Actions (node = the node executing it):

========================  ========  ==========================================
``Timeout``               internal  start a candidacy, ``payload=null``
``RequestVote``           output    candidate asks a peer, ``{"to": j}``
``HandleRequestVote``     input     ``{"from": i, "term": t}``
``HandleVoteResp``        input     ``{"from": j, "term": t, "granted": b}``
``BecomeLeader``          internal  candidate holding a strict majority
========================  ========  ==========================================
"""

from __future__ import annotations

from collections.abc import Mapping

from .canon import CanonValue, encode_unchecked
from .checker import Invariant, Model
from .model import Action, ActionKind, State

INPUT, OUTPUT, INTERNAL = ActionKind.INPUT, ActionKind.OUTPUT, ActionKind.INTERNAL

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"


class UnknownModel(KeyError):
    pass


class BadParams(ValueError):
    pass


def node_vars(i: int) -> tuple[str, str, str]:
    """Names of the variables an implementation node reports."""
    return f"term_{i}", f"voted_for_{i}", f"role_{i}"


def _msg_key(m: dict) -> bytes:
    return encode_unchecked(m)


class ElectionModel(Model):
    def __init__(self, node_count: int, max_term: int, *, buggy: bool = False):
        if isinstance(node_count, bool) or not isinstance(node_count, int) or node_count < 2:
            raise BadParams(f"node_count must be an integer >= 2, got {node_count!r}")
        if isinstance(max_term, bool) or not isinstance(max_term, int) or max_term < 1:
            raise BadParams(f"max_term must be an integer >= 1, got {max_term!r}")
        self.node_count = node_count
        self.max_term = max_term
        self.buggy = buggy
        super().__init__(
            "election",
            self._init,
            self._next,
            [Invariant("AtMostOneLeaderPerTerm", at_most_one_leader_per_term)],
        )

    @property
    def nodes(self) -> range:
        return range(1, self.node_count + 1)

    def params(self) -> dict:
        return {"node_count": self.node_count, "max_term": self.max_term}

    def __repr__(self):
        bug = ", buggy=True" if self.buggy else ""
        return f"ElectionModel({self.node_count}, {self.max_term}{bug})"

    def _init(self):
        d: dict = {}
        for i in self.nodes:
            d[f"term_{i}"] = 0
            d[f"voted_for_{i}"] = None
            d[f"role_{i}"] = FOLLOWER
            d[f"votes_{i}"] = []
            d[f"rv_sent_{i}"] = []
        d["msgs"] = []
        return [State(d)]

    @staticmethod
    def _step_down(d: dict, i: int, term: int) -> None:
        d[f"term_{i}"] = term
        d[f"role_{i}"] = FOLLOWER
        d[f"voted_for_{i}"] = None
        d[f"votes_{i}"] = []
        d[f"rv_sent_{i}"] = []

    @staticmethod
    def _send(d: dict, msg: dict) -> None:
        d["msgs"] = sorted(d["msgs"] + [msg], key=_msg_key)

    def _next(self, s: State) -> list[tuple[Action, State]]:
        out: list[tuple[Action, State]] = []
        n = self.node_count

        def emit(action: Action, d: dict) -> None:
            out.append((action, State._trusted(d)))

        def copy() -> dict:
            # shallow: list values are always replaced, never mutated in place
            return dict(s.vars)

        for i in self.nodes:
            role, term = s[f"role_{i}"], s[f"term_{i}"]
            if role != LEADER and term < self.max_term:
                d = copy()
                d[f"term_{i}"] = term + 1
                d[f"role_{i}"] = CANDIDATE
                d[f"voted_for_{i}"] = i
                d[f"votes_{i}"] = [i]
                d[f"rv_sent_{i}"] = []
                emit(Action(INTERNAL, "Timeout", i, None), d)
            if role == CANDIDATE:
                for j in self.nodes:
                    if j != i and j not in s[f"rv_sent_{i}"]:
                        d = copy()
                        d[f"rv_sent_{i}"] = sorted(d[f"rv_sent_{i}"] + [j])
                        self._send(d, {"type": "rv", "from": i, "to": j, "term": term})
                        emit(Action(OUTPUT, "RequestVote", i, {"to": j}), d)
                if 2 * len(s[f"votes_{i}"]) > n:
                    d = copy()
                    d[f"role_{i}"] = LEADER
                    emit(Action(INTERNAL, "BecomeLeader", i, None), d)

        for k, m in enumerate(s["msgs"]):
            d = copy()
            d["msgs"] = d["msgs"][:k] + d["msgs"][k + 1 :]
            if m["type"] == "rv":
                emit(self._handle_request_vote(d, m), d)
            else:
                emit(self._handle_vote_resp(d, m), d)
        return out

    def _handle_request_vote(self, d: dict, m: dict) -> Action:
        me, cand, t = m["to"], m["from"], m["term"]
        if t > d[f"term_{me}"]:
            self._step_down(d, me, t)
        grant = t == d[f"term_{me}"]
        if not self.buggy:
            grant = grant and d[f"voted_for_{me}"] in (None, cand)
        if grant:
            d[f"voted_for_{me}"] = cand
        self._send(
            d,
            {"type": "rvr", "from": me, "to": cand, "term": d[f"term_{me}"], "granted": grant},
        )
        return Action(INPUT, "HandleRequestVote", me, {"from": cand, "term": t})

    def _handle_vote_resp(self, d: dict, m: dict) -> Action:
        me, voter, t = m["to"], m["from"], m["term"]
        if t > d[f"term_{me}"]:
            self._step_down(d, me, t)
        elif t == d[f"term_{me}"] and d[f"role_{me}"] == CANDIDATE and m["granted"]:
            d[f"votes_{me}"] = sorted(set(d[f"votes_{me}"]) | {voter})
        return Action(
            INPUT, "HandleVoteResp", me, {"from": voter, "term": t, "granted": m["granted"]}
        )


def at_most_one_leader_per_term(s: State) -> bool:
    seen: set[int] = set()
    i = 1
    while f"role_{i}" in s:
        if s[f"role_{i}"] == LEADER:
            t = s[f"term_{i}"]
            if t in seen:
                return False
            seen.add(t)
        i += 1
    return True


_BUILTINS = {"election"}


def builtin_model(name: str, params: Mapping[str, CanonValue] | None = None) -> Model:
    params = dict(params or {})
    if name not in _BUILTINS:
        raise UnknownModel(name)
    unknown = set(params) - {"node_count", "max_term", "buggy"}
    if unknown:
        raise BadParams(f"unknown parameter(s) {sorted(unknown)}")
    return ElectionModel(
        params.get("node_count", 3),
        params.get("max_term", 1),
        buggy=bool(params.get("buggy", False)),
    )


def inject_bug(model: Model) -> ElectionModel:
    """The double-vote variant: a node grants every same-term vote request,
    even after voting for another candidate."""
    if not isinstance(model, ElectionModel):
        raise TypeError(f"inject_bug needs the builtin election model, got {model!r}")
    return ElectionModel(model.node_count, model.max_term, buggy=True)
