"""Server-planned execution of complex queries over distributed models.

The server decomposes a query (in disjunctive normal form) into atomic
steps, routes each projection to the clients owning its relation, combines
intermediate embeddings, and aggregates per-client score tables into one
global ranking. Queries fully covered by one client run entirely inside
that client's local model; only genuinely cross-graph queries round-trip
intermediate embeddings through the server.

Privacy note: intermediate query embeddings are visible to the server
during cross-graph execution by protocol design; the blindness guarantee
covers stored entity tables, not query-time intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import ModelState, intersect_embed, score_entities
from .errors import RetrievalError
from .queries import Anchor, Intersection, Projection, Query, anchors_of, relations_of, to_dnf

IN_GRAPH_PLAN = "in-graph"
CROSS_PLAN = "cross-graph"
UNSCORED = -np.inf
ANCHOR_FETCH = -1  # pseudo-relation: return the anchor row unchanged


@dataclass(frozen=True)
class ClientProject:
    """Compute input + R[relation] at each owning client; average owners.

    src == -1 means the input is the anchor entity's embedding row; owners
    not holding that entity are skipped. relation == ANCHOR_FETCH returns
    the anchor row itself (degenerate anchor-only branches).
    """

    out: int
    relation: int
    clients: tuple
    src: int = -1
    anchor: int = -1


@dataclass(frozen=True)
class ServerCombine:
    """Combine earlier slots: an intersection (operator network applied to
    the stacked inputs) or the terminal union-max marker consumed at scoring
    time. Runs with the server's operator weights unless pinned to a client
    (single-client plans, which never round-trip through the server)."""

    out: int
    kind: str  # "intersection" | "union-max"
    srcs: tuple
    client: Optional[int] = None


@dataclass(frozen=True)
class ExecutionPlan:
    kind: str  # IN_GRAPH_PLAN | CROSS_PLAN
    query: Query
    host: Optional[int]  # owning client for single-client plans
    steps: tuple
    terminal: tuple  # one slot per DNF disjunct

    def trace(self) -> list:
        out = []
        for s in self.steps:
            if isinstance(s, ClientProject):
                out.append(
                    {
                        "step": "project",
                        "out": s.out,
                        "relation": s.relation,
                        "clients": list(s.clients),
                        "src": s.src,
                        "anchor": s.anchor,
                    }
                )
            else:
                out.append(
                    {"step": s.kind, "out": s.out, "srcs": list(s.srcs), "client": s.client}
                )
        return out


@dataclass
class OwnershipMap:
    """Who can compute what: relation -> clients embedding it, entity ->
    clients embedding it (model vocabulary, not triple incidence)."""

    relation_owners: dict
    entity_owners: dict

    def covering_clients(self, query: Query) -> list:
        rels = relations_of(query)
        anchors = anchors_of(query)
        cover = None
        for r in rels:
            owners = set(self.relation_owners.get(r, ()))
            cover = owners if cover is None else cover & owners
        for a in anchors:
            owners = set(self.entity_owners.get(a, ()))
            cover = owners if cover is None else cover & owners
        return sorted(cover or ())


def build_ownership(states: dict) -> OwnershipMap:
    """states: client id -> ModelState (or anything with the id arrays)."""
    rel_owners: dict = {}
    ent_owners: dict = {}
    for cid in sorted(states):
        st = _model(states[cid])
        for r in st.relation_ids:
            rel_owners.setdefault(int(r), []).append(cid)
        for e in st.entity_ids:
            ent_owners.setdefault(int(e), []).append(cid)
    return OwnershipMap(
        relation_owners={r: tuple(v) for r, v in rel_owners.items()},
        entity_owners={e: tuple(v) for e, v in ent_owners.items()},
    )


def _model(obj) -> ModelState:
    return obj.state if hasattr(obj, "state") else obj


def plan_query(query: Query, ownership: OwnershipMap, host: Optional[int] = None) -> ExecutionPlan:
    """Route a query: single covering client -> whole-tree local plan
    (preferring ``host`` when it covers); otherwise per-atom cross plan."""
    for r in sorted(relations_of(query)):
        if not ownership.relation_owners.get(r):
            raise RetrievalError(f"relation {r} is owned by no client")
    covering = ownership.covering_clients(query)
    if host is not None and host in covering:
        chosen: Optional[int] = host
    elif covering:
        chosen = covering[0]
    else:
        chosen = None

    disjuncts = to_dnf(query)
    steps: list = []

    def emit(node: Query) -> int:
        if isinstance(node, Anchor):
            owners = (chosen,) if chosen is not None else ownership.entity_owners.get(node.entity, ())
            if not owners:
                raise RetrievalError(f"entity {node.entity} is embedded by no client")
            steps.append(ClientProject(len(steps), ANCHOR_FETCH, tuple(owners), -1, node.entity))
            return len(steps) - 1
        if isinstance(node, Projection):
            owners = (chosen,) if chosen is not None else ownership.relation_owners[node.relation]
            if isinstance(node.child, Anchor):
                steps.append(
                    ClientProject(len(steps), node.relation, tuple(owners), -1, node.child.entity)
                )
            else:
                src = emit(node.child)
                steps.append(ClientProject(len(steps), node.relation, tuple(owners), src))
            return len(steps) - 1
        if isinstance(node, Intersection):
            srcs = tuple(emit(c) for c in node.children)
            steps.append(ServerCombine(len(steps), "intersection", srcs, client=chosen))
            return len(steps) - 1
        raise RetrievalError(f"cannot plan node {node!r}")

    terminal = tuple(emit(dj) for dj in disjuncts)
    if len(terminal) > 1:
        steps.append(ServerCombine(len(steps), "union-max", terminal, client=chosen))
    return ExecutionPlan(
        kind=IN_GRAPH_PLAN if chosen is not None else CROSS_PLAN,
        query=query,
        host=chosen,
        steps=tuple(steps),
        terminal=terminal,
    )


def execute_plan(plan: ExecutionPlan, states: dict, server_theta: Optional[dict] = None) -> np.ndarray:
    """Run the plan steps in order; returns (n_disjuncts, d) embeddings,
    one per disjunct (the union never merges in embedding space)."""
    slots: dict = {}
    for step in plan.steps:
        if isinstance(step, ClientProject):
            outputs = []
            for cid in step.clients:
                st = _model(states[cid])
                if step.src >= 0:
                    base = slots[step.src]
                else:
                    if int(step.anchor) not in st.eidx:
                        continue  # owner lacks the anchor row
                    base = st.E[st.eidx[int(step.anchor)]]
                if step.relation == ANCHOR_FETCH:
                    outputs.append(base.copy())
                else:
                    outputs.append(base + st.R[st.local_relation(step.relation)])
            if not outputs:
                raise RetrievalError(
                    f"step {step.out}: no owning client can evaluate relation "
                    f"{step.relation} from anchor {step.anchor}"
                )
            slots[step.out] = outputs[0] if len(outputs) == 1 else np.mean(outputs, axis=0)
        elif step.kind == "intersection":
            vs = np.stack([slots[s] for s in step.srcs])
            if step.client is not None:
                st = _model(states[step.client])
                theta = {"W1": st.W1, "b1": st.b1, "W2": st.W2, "b2": st.b2}
            else:
                if server_theta is None:
                    raise RetrievalError(f"step {step.out}: no server operator weights")
                theta = server_theta
            slots[step.out] = intersect_embed(vs, theta["W1"], theta["b1"], theta["W2"], theta["b2"])
        # union-max is a scoring-time marker, not an embedding op
    return np.stack([slots[t] for t in plan.terminal])


@dataclass
class ScoreTable:
    """Global score per entity (max over disjuncts of cross-client mean
    scores) plus how many clients scored each entity; coverage 0 rows carry
    the unscored sentinel and rank last."""

    entity_ids: np.ndarray
    scores: np.ndarray
    coverage: np.ndarray


def score_locally(state, disjuncts: np.ndarray) -> ScoreTable:
    """One client's table over its own entities (single-client routing)."""
    st = _model(state)
    per_dj = np.stack([score_entities(q, st.E) for q in np.atleast_2d(disjuncts)])
    return ScoreTable(
        entity_ids=st.entity_ids.copy(),
        scores=per_dj.max(axis=0),
        coverage=np.ones(len(st.entity_ids), dtype=np.int64),
    )


def score_and_aggregate(disjuncts: np.ndarray, states: dict) -> ScoreTable:
    """Every client scores all its entities against every disjunct; the
    server averages per entity over the clients that scored it, then takes
    the max over disjuncts."""
    disjuncts = np.atleast_2d(disjuncts)
    all_ids = sorted({int(e) for cid in states for e in _model(states[cid]).entity_ids})
    global_ids = np.array(all_ids, dtype=np.int64)
    n = len(global_ids)
    sums = np.zeros((n, len(disjuncts)))
    coverage = np.zeros(n, dtype=np.int64)
    for cid in sorted(states):
        st = _model(states[cid])
        rows = np.searchsorted(global_ids, st.entity_ids)
        local = np.stack([score_entities(q, st.E) for q in disjuncts], axis=1)
        sums[rows] += local
        coverage[rows] += 1
    scores = np.full(n, UNSCORED)
    touched = coverage > 0
    scores[touched] = (sums[touched] / coverage[touched, None]).max(axis=1)
    return ScoreTable(entity_ids=global_ids, scores=scores, coverage=coverage)


def rank_answers(table: ScoreTable, filter_out=frozenset(), k: Optional[int] = None):
    """Filtered ranking: drop ``filter_out`` entities, sort by descending
    score with ties broken by ascending entity id, ranks 1-based.

    Returns (top-k list of (entity id, score), rank function). The rank
    function reads only the precomputed order; it touches no graph data.
    """
    filter_out = {int(e) for e in filter_out}
    if filter_out:
        keep = np.array([int(e) not in filter_out for e in table.entity_ids])
        ids = table.entity_ids[keep]
        sc = table.scores[keep]
    else:
        ids = table.entity_ids
        sc = table.scores
    order = np.lexsort((ids, -sc))
    ranked_ids = ids[order]
    ranked_scores = sc[order]
    rank_of = {int(e): i + 1 for i, e in enumerate(ranked_ids)}

    def rank_fn(entity) -> int:
        try:
            return rank_of[int(entity)]
        except KeyError:
            raise RetrievalError(f"entity {entity} is filtered out or unknown") from None

    top = k if k is not None else len(ranked_ids)
    ranked = [(int(e), float(s)) for e, s in zip(ranked_ids[:top], ranked_scores[:top])]
    return ranked, rank_fn
