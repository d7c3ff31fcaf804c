"""Knowledge-graph storage: loading triple files, partitioning a global graph
into per-client shards, and staging each shard into cumulative
train / train+valid / train+valid+test graphs.

All ids are global dense integers assigned by a shared vocabulary; entity and
relation indexes are shared across clients while the triples themselves stay
per-shard. Graphs are immutable after construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, TripleParseError, VocabularyError


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocabulary:
    """Token <-> dense integer id map, first-seen order.

    A frozen vocabulary rejects unknown tokens instead of growing.
    """

    def __init__(self, tokens: Iterable[str] = (), frozen: bool = False):
        self._token_to_id: dict[str, int] = {}
        self._tokens: list[str] = []
        self.frozen = False
        for t in tokens:
            self.add(t)
        self.frozen = frozen

    def add(self, token: str) -> int:
        idx = self._token_to_id.get(token)
        if idx is not None:
            return idx
        if self.frozen:
            raise VocabularyError(f"unknown token under frozen vocabulary: {token!r}")
        idx = len(self._tokens)
        self._token_to_id[token] = idx
        self._tokens.append(token)
        return idx

    def id_of(self, token: str) -> int:
        try:
            return self._token_to_id[token]
        except KeyError:
            raise VocabularyError(f"unknown token: {token!r}") from None

    def token_of(self, idx: int) -> str:
        try:
            return self._tokens[idx]
        except IndexError:
            raise VocabularyError(f"unknown id: {idx}") from None

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for idx, token in enumerate(self._tokens):
                fh.write(f"{token}\t{idx}\n")

    @classmethod
    def load(cls, path: Path | str, frozen: bool = True) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TripleParseError(path, line_no, line)
                token, idx = parts[0], int(parts[1])
                got = vocab.add(token)
                if got != idx:
                    raise VocabularyError(
                        f"{path}:{line_no}: non-contiguous id {idx} for {token!r}"
                    )
        vocab.frozen = frozen
        return vocab


@dataclass
class VocabPair:
    """Entity and relation vocabularies that travel with a graph."""

    entities: Vocabulary = field(default_factory=Vocabulary)
    relations: Vocabulary = field(default_factory=Vocabulary)

    def freeze(self) -> "VocabPair":
        self.entities.frozen = True
        self.relations.frozen = True
        return self


class Graph:
    """An immutable triple store with adjacency lookups.

    ``entities`` and ``relations`` are ascending global-id arrays and may be
    wider than what the triples mention (staged graphs keep the vocabulary of
    the full client graph).
    """

    def __init__(
        self,
        triples: Iterable[Triple],
        entities: Optional[Iterable[int]] = None,
        relations: Optional[Iterable[int]] = None,
    ):
        self.triples: frozenset[Triple] = frozenset(
            Triple(int(h), int(r), int(t)) for (h, r, t) in triples
        )
        ent = set() if entities is None else {int(e) for e in entities}
        rel = set() if relations is None else {int(r) for r in relations}
        for h, r, t in self.triples:
            ent.add(h)
            ent.add(t)
            rel.add(r)
        self.entities = np.array(sorted(ent), dtype=np.int64)
        self.relations = np.array(sorted(rel), dtype=np.int64)
        self.entity_set: frozenset[int] = frozenset(ent)
        self.relation_set: frozenset[int] = frozenset(rel)
        adjacency: dict[tuple[int, int], set[int]] = {}
        incoming: dict[int, set[tuple[int, int]]] = {}
        for h, r, t in self.triples:
            adjacency.setdefault((h, r), set()).add(t)
            incoming.setdefault(t, set()).add((h, r))
        self.adjacency = {k: frozenset(v) for k, v in adjacency.items()}
        self._incoming = {k: tuple(sorted(v)) for k, v in incoming.items()}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    def neighbors(self, head: int, relation: int) -> frozenset[int]:
        return self.adjacency.get((head, relation), frozenset())

    def incoming(self, tail: int) -> tuple[tuple[int, int], ...]:
        """(head, relation) pairs of edges ending at ``tail``, sorted."""
        return self._incoming.get(tail, ())

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.triples == other.triples
            and np.array_equal(self.entities, other.entities)
            and np.array_equal(self.relations, other.relations)
        )

    def __repr__(self) -> str:
        return (
            f"Graph(entities={self.n_entities}, relations={self.n_relations}, "
            f"triples={self.n_triples})"
        )


@dataclass
class StagedShard:
    """One client's cumulative train / valid / test graphs.

    Invariant: triples(g_train) <= triples(g_val) <= triples(g_test), and all
    three stages share the entity/relation vocabulary of the full shard.
    """

    client_id: int
    g_train: Graph
    g_val: Graph
    g_test: Graph

    def validate(self) -> None:
        if not self.g_train.triples <= self.g_val.triples <= self.g_test.triples:
            raise ConfigError("staged shard is not cumulative")


MODE_RELATION = "relation-partition"
MODE_TRIPLE = "random-triple"


@dataclass
class SplitConfig:
    n_clients: int
    mode: str = MODE_RELATION
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.mode not in (MODE_RELATION, MODE_TRIPLE):
            raise ConfigError(f"unknown split mode: {self.mode!r}")
        self.ratios = tuple(float(x) for x in self.ratios)
        if len(self.ratios) != 3 or any(x < 0 for x in self.ratios):
            raise ConfigError(f"ratios must be 3 non-negative fractions, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios must sum to 1, got {self.ratios}")


def _parse_triple_file(path: Path | str, vocab: VocabPair) -> set[Triple]:
    triples: set[Triple] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, line_no, line)
            h = vocab.entities.add(parts[0])
            r = vocab.relations.add(parts[1])
            t = vocab.entities.add(parts[2])
            triples.add(Triple(h, r, t))
    return triples


def load_triples(path: Path | str, vocab: Optional[VocabPair] = None) -> tuple[Graph, VocabPair]:
    """Load a tab-separated head/relation/tail file into a Graph.

    Tokens map to dense ids in first-seen order unless an existing ``vocab``
    is supplied (a frozen one rejects unseen tokens). Duplicate lines are
    deduplicated; empty lines are skipped.
    """
    if vocab is None:
        vocab = VocabPair()
    triples = _parse_triple_file(path, vocab)
    return Graph(triples), vocab


def load_dataset(path: Path | str, vocab: Optional[VocabPair] = None) -> tuple[Graph, VocabPair]:
    """Load a triple file, or every *.tsv/*.txt file in a directory (sorted by
    name, union of triples under one shared vocabulary)."""
    path = Path(path)
    if vocab is None:
        vocab = VocabPair()
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix in (".tsv", ".txt") and p.is_file()
        )
        if not files:
            raise ConfigError(f"no .tsv/.txt triple files in {path}")
        triples: set[Triple] = set()
        for p in files:
            triples |= _parse_triple_file(p, vocab)
        return Graph(triples), vocab
    return load_triples(path, vocab)


def split_clients(g: Graph, cfg: SplitConfig) -> list[Graph]:
    """Partition a graph into ``cfg.n_clients`` client graphs.

    relation-partition: relations are shuffled by seed and dealt round-robin;
    a client gets exactly the triples whose relation it owns.
    random-triple: triples are shuffled by seed and dealt round-robin, so
    relations may overlap across clients.
    """
    if g.n_triples == 0:
        raise ConfigError("cannot split an empty graph")
    rng = np.random.default_rng(cfg.seed)
    if cfg.mode == MODE_RELATION:
        if cfg.n_clients > g.n_relations:
            raise ConfigError(
                f"n_clients={cfg.n_clients} exceeds relation count {g.n_relations} "
                "in relation-partition mode"
            )
        order = rng.permutation(g.relations)
        owner = {int(r): i % cfg.n_clients for i, r in enumerate(order)}
        buckets: list[set[Triple]] = [set() for _ in range(cfg.n_clients)]
        for tr in g.triples:
            buckets[owner[tr.relation]].add(tr)
        return [Graph(b) for b in buckets]
    triples = sorted(g.triples)
    order = rng.permutation(len(triples))
    buckets = [set() for _ in range(cfg.n_clients)]
    for i, idx in enumerate(order):
        buckets[i % cfg.n_clients].add(triples[idx])
    return [Graph(b) for b in buckets]


def stage_shard(
    client_graph: Graph,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    client_id: int = 0,
) -> StagedShard:
    """Shuffle the client's triples by seed and cut at cumulative ratio
    boundaries; stages are cumulative and share the full shard vocabulary."""
    ratios = tuple(float(x) for x in ratios)
    if len(ratios) != 3 or any(x < 0 for x in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"invalid stage ratios: {ratios}")
    triples = sorted(client_graph.triples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triples))
    n = len(triples)
    cut_train = int(n * ratios[0])
    cut_val = int(n * (ratios[0] + ratios[1]))
    shuffled = [triples[i] for i in order]
    ents, rels = client_graph.entities, client_graph.relations
    g_train = Graph(shuffled[:cut_train], entities=ents, relations=rels)
    g_val = Graph(shuffled[:cut_val], entities=ents, relations=rels)
    g_test = Graph(shuffled, entities=ents, relations=rels)
    shard = StagedShard(client_id, g_train, g_val, g_test)
    shard.validate()
    return shard


def merge_global(shards: Sequence[StagedShard]) -> StagedShard:
    """Stage-wise union of shards; the merged shard carries client_id -1.

    A single shard is returned unchanged.
    """
    if not shards:
        raise ConfigError("merge_global needs at least one shard")
    if len(shards) == 1:
        return shards[0]
    train: set[Triple] = set()
    val: set[Triple] = set()
    test: set[Triple] = set()
    ents: set[int] = set()
    rels: set[int] = set()
    for sh in shards:
        train |= sh.g_train.triples
        val |= sh.g_val.triples
        test |= sh.g_test.triples
        ents.update(int(e) for e in sh.g_test.entities)
        rels.update(int(r) for r in sh.g_test.relations)
    return StagedShard(
        -1,
        Graph(train, entities=ents, relations=rels),
        Graph(val, entities=ents, relations=rels),
        Graph(test, entities=ents, relations=rels),
    )


def _write_triples(path: Path, triples: Iterable[Triple], vocab: VocabPair) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in sorted(triples):
            fh.write(
                f"{vocab.entities.token_of(h)}\t"
                f"{vocab.relations.token_of(r)}\t"
                f"{vocab.entities.token_of(t)}\n"
            )


def save_shard(shard: StagedShard, out_dir: Path | str, vocab: VocabPair) -> None:
    """Write train.tsv / valid.tsv / test.tsv (stage increments) plus the
    shared global vocabulary files into one client directory."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    _write_triples(out / "train.tsv", shard.g_train.triples, vocab)
    _write_triples(out / "valid.tsv", shard.g_val.triples - shard.g_train.triples, vocab)
    _write_triples(out / "test.tsv", shard.g_test.triples - shard.g_val.triples, vocab)
    vocab.entities.save(out / "entities.tsv")
    vocab.relations.save(out / "relations.tsv")


def load_shard(shard_dir: Path | str, client_id: int) -> tuple[StagedShard, VocabPair]:
    shard_dir = Path(shard_dir)
    vocab = VocabPair(
        Vocabulary.load(shard_dir / "entities.tsv"),
        Vocabulary.load(shard_dir / "relations.tsv"),
    )
    train, _ = load_triples(shard_dir / "train.tsv", vocab)
    valid_inc, _ = load_triples(shard_dir / "valid.tsv", vocab)
    test_inc, _ = load_triples(shard_dir / "test.tsv", vocab)
    all_triples = train.triples | valid_inc.triples | test_inc.triples
    full = Graph(all_triples)
    ents, rels = full.entities, full.relations
    shard = StagedShard(
        client_id,
        Graph(train.triples, entities=ents, relations=rels),
        Graph(train.triples | valid_inc.triples, entities=ents, relations=rels),
        full,
    )
    shard.validate()
    return shard, vocab


def save_shards(shards: Sequence[StagedShard], out_dir: Path | str, vocab: VocabPair) -> list[Path]:
    """One subdirectory per client (client_000, client_001, ...)."""
    out = Path(out_dir)
    paths = []
    for shard in shards:
        p = out / f"client_{shard.client_id:03d}"
        save_shard(shard, p, vocab)
        paths.append(p)
    return paths


def load_shards(root: Path | str) -> tuple[list[StagedShard], VocabPair]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("client_"))
    if not dirs:
        raise ConfigError(f"no client_* shard directories under {root}")
    shards = []
    vocab = None
    for p in dirs:
        shard, v = load_shard(p, int(p.name.split("_")[1]))
        shards.append(shard)
        vocab = v
    return shards, vocab
