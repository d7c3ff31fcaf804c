"""Synthetic clustered knowledge graph generator.

Entities are grouped into equal clusters arranged along a chain; each
relation moves a fixed number of steps toward the higher-numbered end, so
composing relations adds their shifts. Placing cluster i at i*v and setting
each relation vector to shift*v solves every edge exactly, which makes the
graphs learnable by translation embeddings (a cyclic layout would not be:
wrapping around forces the relation vectors to cancel). A noise fraction
rewires tails uniformly at random, and head_coverage < 1 restricts each
relation's heads to a random subset of the eligible clusters, so no single
relation constrains every entity on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphstore import Graph, Triple, VocabPair, Vocabulary, _write_triples


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 200
    n_clusters: int = 10
    n_relations: int = 5
    edges_per_head: int = 2
    noise: float = 0.1
    head_coverage: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < self.n_clusters or self.n_clusters < 2:
            raise ConfigError("need n_entities >= n_clusters >= 2")
        if self.n_entities % self.n_clusters != 0:
            raise ConfigError("n_entities must be a multiple of n_clusters")
        if not 1 <= self.n_relations < self.n_clusters:
            raise ConfigError("need 1 <= n_relations < n_clusters (distinct shifts with heads left)")
        size = self.n_entities // self.n_clusters
        if not 1 <= self.edges_per_head <= size:
            raise ConfigError("edges_per_head must fit inside one cluster")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise must be in [0, 1)")
        if not 0.0 < self.head_coverage <= 1.0:
            raise ConfigError("head_coverage must be in (0, 1]")

    @property
    def head_clusters(self) -> int:
        return max(1, round(self.head_coverage * self.n_clusters))


def synthetic_graph(cfg: SynthConfig = SynthConfig()) -> tuple[Graph, VocabPair]:
    """Build the clustered chain graph and a token vocabulary for it."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.n_entities // cfg.n_clusters
    # distinct shifts in 1..n_relations, assigned to relations in random order
    shifts = 1 + rng.permutation(cfg.n_relations)
    triples = set()
    for r, shift in enumerate(shifts):
        # heads need a target cluster, so the last `shift` clusters are out
        eligible = cfg.n_clusters - int(shift)
        if cfg.head_clusters < eligible:
            chosen = np.sort(rng.permutation(eligible)[: cfg.head_clusters])
        else:
            chosen = np.arange(eligible)
        heads = (chosen[:, None] * size + np.arange(size)).ravel()
        for h in heads:
            target = h // size + int(shift)
            tails = target * size + rng.choice(size, size=cfg.edges_per_head, replace=False)
            for t in tails:
                if rng.random() < cfg.noise:
                    t = rng.integers(cfg.n_entities)
                triples.add(Triple(int(h), int(r), int(t)))
    graph = Graph(triples, entities=range(cfg.n_entities), relations=range(cfg.n_relations))
    width = len(str(cfg.n_entities - 1))
    vocab = VocabPair(
        entities=Vocabulary((f"e{i:0{width}d}" for i in range(cfg.n_entities)), frozen=True),
        relations=Vocabulary((f"r{i}" for i in range(cfg.n_relations)), frozen=True),
    )
    return graph, vocab


def write_synthetic_tsv(path, cfg: SynthConfig = SynthConfig()) -> tuple[Graph, VocabPair]:
    """Write the generated graph as a tab-separated triple file."""
    graph, vocab = synthetic_graph(cfg)
    _write_triples(path, graph.triples, vocab)
    return graph, vocab
