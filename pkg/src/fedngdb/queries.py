"""First-order logical queries over knowledge graphs.

A query is a tree of Anchor / Projection / Intersection / Union nodes with a
single free target variable at the root. Eight template shapes are supported
(1p, 2p, 2i, 3i, ip, pi, 2u, up). Queries are sampled backwards from a random
answer on the stage-appropriate graph, answered by set traversal, normalized
to disjunctive form for the embedding model, and classified as in-graph
(one client's shard can answer every atom) or cross-graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union as TUnion

import numpy as np

from .errors import ConfigError, SamplingError
from .graphstore import Graph, StagedShard

QUERY_TYPES = ("1p", "2p", "2i", "3i", "ip", "pi", "2u", "up")
IN_GRAPH = "in-graph"
CROSS_GRAPH = "cross-graph"


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "Query"


@dataclass(frozen=True)
class Intersection:
    children: tuple["Query", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ConfigError("intersection needs at least 2 branches")


@dataclass(frozen=True)
class UnionQ:
    children: tuple["Query", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ConfigError("union needs at least 2 branches")


Query = TUnion[Anchor, Projection, Intersection, UnionQ]


def answer_query(query: Query, graph: Graph) -> frozenset[int]:
    """Exact answer set under set semantics.

    Anchors missing from the graph's entity index denote the empty set, so
    every query still evaluates (possibly to no answers).
    """
    if isinstance(query, Anchor):
        if query.entity in graph.entity_set:
            return frozenset((query.entity,))
        return frozenset()
    if isinstance(query, Projection):
        base = answer_query(query.child, graph)
        out: set[int] = set()
        for h in base:
            out |= graph.neighbors(h, query.relation)
        return frozenset(out)
    if isinstance(query, Intersection):
        sets = [answer_query(c, graph) for c in query.children]
        acc = sets[0]
        for s in sets[1:]:
            acc &= s
        return acc
    if isinstance(query, UnionQ):
        out = set()
        for c in query.children:
            out |= answer_query(c, graph)
        return frozenset(out)
    raise TypeError(f"not a query node: {query!r}")


def to_dnf(query: Query) -> tuple[Query, ...]:
    """Rewrite into a union-free disjunct tuple (unions pulled to the root).

    Union-free queries yield a single disjunct; the rewrite is idempotent and
    preserves the answer set.
    """
    if isinstance(query, Anchor):
        return (query,)
    if isinstance(query, Projection):
        return tuple(Projection(query.relation, d) for d in to_dnf(query.child))
    if isinstance(query, UnionQ):
        out: list[Query] = []
        for c in query.children:
            for d in to_dnf(c):
                if d not in out:
                    out.append(d)
        return tuple(out)
    if isinstance(query, Intersection):
        combos: list[tuple[Query, ...]] = [()]
        for c in query.children:
            disjuncts = to_dnf(c)
            combos = [prefix + (d,) for prefix in combos for d in disjuncts]
        out = []
        for combo in combos:
            node: Query = Intersection(combo)
            if node not in out:
                out.append(node)
        return tuple(out)
    raise TypeError(f"not a query node: {query!r}")


def anchors_of(query: Query) -> frozenset[int]:
    if isinstance(query, Anchor):
        return frozenset((query.entity,))
    if isinstance(query, Projection):
        return anchors_of(query.child)
    acc: set[int] = set()
    for c in query.children:
        acc |= anchors_of(c)
    return frozenset(acc)


def relations_of(query: Query) -> frozenset[int]:
    if isinstance(query, Anchor):
        return frozenset()
    if isinstance(query, Projection):
        return frozenset((query.relation,)) | relations_of(query.child)
    acc: set[int] = set()
    for c in query.children:
        acc |= relations_of(c)
    return frozenset(acc)


def query_depth(query: Query) -> int:
    if isinstance(query, Anchor):
        return 0
    if isinstance(query, Projection):
        return 1 + query_depth(query.child)
    return max(query_depth(c) for c in query.children)


@dataclass(frozen=True)
class QuerySample:
    """A sampled benchmark query with its exact answer sets per stage.

    Answer sets come from the owner's staged graphs for in-graph samples and
    from the merged global staged graphs for cross-graph samples; the novel
    test answers (answers_test - answers_val) are the ranked targets.
    """

    query: Query
    qtype: str
    locality: str
    client_id: int
    answers_train: frozenset[int]
    answers_val: frozenset[int]
    answers_test: frozenset[int]

    @property
    def hard_answers(self) -> frozenset[int]:
        return self.answers_test - self.answers_val


def _stage_graph(shard: StagedShard, stage: str) -> Graph:
    if stage == "train":
        return shard.g_train
    if stage == "valid":
        return shard.g_val
    if stage == "test":
        return shard.g_test
    raise ConfigError(f"unknown stage: {stage!r}")


def shard_footprint(graph: Graph) -> tuple[frozenset[int], frozenset[int]]:
    """(entities, relations) actually mentioned by the graph's triples."""
    ents: set[int] = set()
    rels: set[int] = set()
    for h, r, t in graph.triples:
        ents.add(h)
        ents.add(t)
        rels.add(r)
    return frozenset(ents), frozenset(rels)


def classify_locality(
    query: Query,
    shards: Sequence[StagedShard],
    stage: str = "test",
) -> tuple[str, int]:
    """Decide whether one client's stage graph mentions every atom.

    A client hosts the query when all its relations and anchor entities occur
    in that client's triples; the lowest hosting client id wins. With no host
    the query is cross-graph (owner -1).
    """
    rels = relations_of(query)
    ancs = anchors_of(query)
    hosts = []
    for sh in shards:
        ents_c, rels_c = shard_footprint(_stage_graph(sh, stage))
        if rels <= rels_c and ancs <= ents_c:
            hosts.append(sh.client_id)
    if hosts:
        return IN_GRAPH, min(hosts)
    return CROSS_GRAPH, -1


class _Walker:
    """Backward template walks from a uniformly drawn answer entity."""

    def __init__(self, graph: Graph, rng: np.random.Generator):
        self.g = graph
        self.rng = rng
        self.targets = [int(e) for e in graph.entities if graph.incoming(int(e))]

    def _target(self) -> Optional[int]:
        if not self.targets:
            return None
        return self.targets[int(self.rng.integers(len(self.targets)))]

    def _edge_into(self, v: int) -> Optional[tuple[int, int]]:
        inc = self.g.incoming(v)
        if not inc:
            return None
        return inc[int(self.rng.integers(len(inc)))]

    def _edges_into(self, v: int, k: int) -> Optional[list[tuple[int, int]]]:
        inc = self.g.incoming(v)
        if len(inc) < k:
            return None
        idx = self.rng.choice(len(inc), size=k, replace=False)
        return [inc[int(i)] for i in sorted(idx)]

    def draw(self, qtype: str) -> Optional[Query]:
        v = self._target()
        if v is None:
            return None
        if qtype == "1p":
            h, r = self._edge_into(v)
            return Projection(r, Anchor(h))
        if qtype == "2p":
            m, r2 = self._edge_into(v)
            e1 = self._edge_into(m)
            if e1 is None:
                return None
            h, r1 = e1
            return Projection(r2, Projection(r1, Anchor(h)))
        if qtype in ("2i", "3i"):
            k = 2 if qtype == "2i" else 3
            edges = self._edges_into(v, k)
            if edges is None:
                return None
            return Intersection(tuple(Projection(r, Anchor(h)) for h, r in edges))
        if qtype == "ip":
            m, r3 = self._edge_into(v)
            edges = self._edges_into(m, 2)
            if edges is None:
                return None
            return Projection(r3, Intersection(tuple(Projection(r, Anchor(h)) for h, r in edges)))
        if qtype == "pi":
            edges = self._edges_into(v, 2)
            if edges is None:
                return None
            (m, r2), (h2, r3) = edges
            e1 = self._edge_into(m)
            if e1 is None:
                return None
            h1, r1 = e1
            return Intersection((Projection(r2, Projection(r1, Anchor(h1))), Projection(r3, Anchor(h2))))
        if qtype == "2u":
            edges = self._edges_into(v, 2)
            if edges is None:
                return None
            return UnionQ(tuple(Projection(r, Anchor(h)) for h, r in edges))
        if qtype == "up":
            m, r3 = self._edge_into(v)
            edges = self._edges_into(m, 2)
            if edges is None:
                return None
            return Projection(r3, UnionQ(tuple(Projection(r, Anchor(h)) for h, r in edges)))
        raise ConfigError(f"unknown query type: {qtype!r}")


def derive_seed(seed: int, *parts) -> int:
    """Stable 64-bit stream seed from a base seed and string-able parts."""
    text = ":".join([str(seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _retained(stage: str, a_train, a_val, a_test) -> bool:
    if stage == "train":
        return len(a_train) > 0
    if stage == "valid":
        return a_val != a_train
    return a_test != a_val


def sample_queries(
    shards: Sequence[StagedShard],
    qtype: str,
    count: int,
    stage: str = "test",
    locality: str = IN_GRAPH,
    seed: int = 0,
    budget_factor: int = 100,
) -> list[QuerySample]:
    """Sample ``count`` distinct queries of one template shape.

    In-graph sampling draws ``count`` queries per client by walking backwards
    on the client's stage graph; cross-graph sampling (test stage only) walks
    the merged global stage graph and keeps queries no single client can
    host. Retention: train queries need an answer, valid/test queries need an
    answer novel versus the previous stage. Exhausting the attempt budget of
    ``budget_factor * count`` raises SamplingError carrying what was found.
    """
    from .graphstore import merge_global

    if qtype not in QUERY_TYPES:
        raise ConfigError(f"unknown query type: {qtype!r}")
    if stage not in ("train", "valid", "test"):
        raise ConfigError(f"unknown stage: {stage!r}")
    if locality not in (IN_GRAPH, CROSS_GRAPH):
        raise ConfigError(f"unknown locality: {locality!r}")
    if locality == CROSS_GRAPH and stage != "test":
        raise ConfigError("cross-graph queries are sampled on the test stage only")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")

    merged = merge_global(list(shards))
    out: list[QuerySample] = []

    if locality == IN_GRAPH:
        for sh in shards:
            rng = np.random.default_rng(derive_seed(seed, qtype, locality, sh.client_id))
            walker = _Walker(_stage_graph(sh, stage), rng)
            seen: set[Query] = set()
            got: list[QuerySample] = []
            budget = budget_factor * count
            attempts = 0
            while len(got) < count and attempts < budget:
                attempts += 1
                q = walker.draw(qtype)
                if q is None or q in seen:
                    continue
                seen.add(q)
                a_train = answer_query(q, sh.g_train)
                a_val = answer_query(q, sh.g_val)
                a_test = answer_query(q, sh.g_test)
                if not _retained(stage, a_train, a_val, a_test):
                    continue
                got.append(QuerySample(q, qtype, IN_GRAPH, sh.client_id, a_train, a_val, a_test))
            if len(got) < count:
                raise SamplingError(
                    f"client {sh.client_id}: sampled {len(got)}/{count} {qtype} "
                    f"{stage} queries in {attempts} attempts",
                    achieved=len(got),
                    samples=out + got,
                )
            out.extend(got)
        return out

    rng = np.random.default_rng(derive_seed(seed, qtype, locality, "global"))
    walker = _Walker(_stage_graph(merged, stage), rng)
    seen = set()
    budget = budget_factor * count
    attempts = 0
    while len(out) < count and attempts < budget:
        attempts += 1
        q = walker.draw(qtype)
        if q is None or q in seen:
            continue
        seen.add(q)
        loc, _ = classify_locality(q, shards, stage)
        if loc != CROSS_GRAPH:
            continue
        a_train = answer_query(q, merged.g_train)
        a_val = answer_query(q, merged.g_val)
        a_test = answer_query(q, merged.g_test)
        if not _retained(stage, a_train, a_val, a_test):
            continue
        out.append(QuerySample(q, qtype, CROSS_GRAPH, -1, a_train, a_val, a_test))
    if len(out) < count:
        raise SamplingError(
            f"sampled {len(out)}/{count} cross-graph {qtype} queries in {attempts} attempts",
            achieved=len(out),
            samples=out,
        )
    return out


def query_to_obj(query: Query):
    if isinstance(query, Anchor):
        return ["a", query.entity]
    if isinstance(query, Projection):
        return ["p", query.relation, query_to_obj(query.child)]
    if isinstance(query, Intersection):
        return ["i"] + [query_to_obj(c) for c in query.children]
    if isinstance(query, UnionQ):
        return ["u"] + [query_to_obj(c) for c in query.children]
    raise TypeError(f"not a query node: {query!r}")


def query_from_obj(obj) -> Query:
    tag = obj[0]
    if tag == "a":
        return Anchor(int(obj[1]))
    if tag == "p":
        return Projection(int(obj[1]), query_from_obj(obj[2]))
    if tag == "i":
        return Intersection(tuple(query_from_obj(c) for c in obj[1:]))
    if tag == "u":
        return UnionQ(tuple(query_from_obj(c) for c in obj[1:]))
    raise ConfigError(f"unknown query tag: {tag!r}")


def save_samples(samples: Sequence[QuerySample], path: Path | str) -> None:
    """One JSON object per line; answer sets stored sorted for stable bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "type": s.qtype,
                "locality": s.locality,
                "client": s.client_id,
                "query": query_to_obj(s.query),
                "answers_train": sorted(s.answers_train),
                "answers_val": sorted(s.answers_val),
                "answers_test": sorted(s.answers_test),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_samples(path: Path | str) -> list[QuerySample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                QuerySample(
                    query=query_from_obj(rec["query"]),
                    qtype=rec["type"],
                    locality=rec["locality"],
                    client_id=int(rec["client"]),
                    answers_train=frozenset(rec["answers_train"]),
                    answers_val=frozenset(rec["answers_val"]),
                    answers_test=frozenset(rec["answers_test"]),
                )
            )
    return out
