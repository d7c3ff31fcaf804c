"""Query-embedding model: parameter state, reference embedding operations,
AdamW updates, local differential privacy for uploaded deltas, negative
sampling, and deterministic binary checkpoints.

Parameter layout (all float64): entity table E and relation table R indexed
by local row, with ascending global-id arrays mapping rows back to the shared
vocabulary; intersection weights W1, b1, W2, b2 shared across clients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, VocabularyError
from .kernels import CompiledBatch, compile_batch
from .queries import Anchor, Intersection, Projection, Query, QuerySample, UnionQ, to_dnf

THETA_FIELDS = ("W1", "b1", "W2", "b2")


@dataclass
class ModelState:
    """Model parameters plus the global-id rows they embed."""

    entity_ids: np.ndarray
    relation_ids: np.ndarray
    E: np.ndarray
    R: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    eidx: dict = field(init=False, repr=False)
    ridx: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64)
        self.relation_ids = np.asarray(self.relation_ids, dtype=np.int64)
        if self.E.shape[0] != len(self.entity_ids):
            raise ConfigError("entity table and id map disagree")
        if self.R.shape[0] != len(self.relation_ids):
            raise ConfigError("relation table and id map disagree")
        self.eidx = {int(e): i for i, e in enumerate(self.entity_ids)}
        self.ridx = {int(r): i for i, r in enumerate(self.relation_ids)}

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def clone(self) -> "ModelState":
        return ModelState(
            self.entity_ids.copy(),
            self.relation_ids.copy(),
            self.E.copy(),
            self.R.copy(),
            self.W1.copy(),
            self.b1.copy(),
            self.W2.copy(),
            self.b2.copy(),
        )

    def theta(self) -> dict:
        return {name: getattr(self, name) for name in THETA_FIELDS}

    def params(self) -> dict:
        out = {"E": self.E, "R": self.R}
        out.update(self.theta())
        return out

    def local_entity(self, global_id: int) -> int:
        try:
            return self.eidx[int(global_id)]
        except KeyError:
            raise VocabularyError(f"entity {global_id} not embedded locally") from None

    def local_relation(self, global_id: int) -> int:
        try:
            return self.ridx[int(global_id)]
        except KeyError:
            raise VocabularyError(f"relation {global_id} not embedded locally") from None


def init_model(entity_ids, relation_ids, dim: int, seed: int) -> ModelState:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) tables and weights, zero biases."""
    if dim < 1:
        raise ConfigError(f"embedding dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    n_e = len(entity_ids)
    n_r = len(relation_ids)
    return ModelState(
        entity_ids=np.asarray(entity_ids, dtype=np.int64),
        relation_ids=np.asarray(relation_ids, dtype=np.int64),
        E=rng.uniform(-bound, bound, size=(n_e, dim)),
        R=rng.uniform(-bound, bound, size=(n_r, dim)),
        W1=rng.uniform(-bound, bound, size=(dim, dim)),
        b1=np.zeros(dim),
        W2=rng.uniform(-bound, bound, size=(dim, dim)),
        b2=np.zeros(dim),
    )


def intersect_embed(vectors: np.ndarray, W1, b1, W2, b2) -> np.ndarray:
    """Permutation-invariant mix: W2 @ relu(W1 @ mean + b1) + b2 + mean."""
    m = np.mean(vectors, axis=0)
    return W2 @ np.maximum(W1 @ m + b1, 0.0) + b2 + m


def embed_query(tree: Query, state: ModelState) -> np.ndarray:
    """Embed a union-free query tree by structural recursion."""
    if isinstance(tree, Anchor):
        return state.E[state.local_entity(tree.entity)].copy()
    if isinstance(tree, Projection):
        return embed_query(tree.child, state) + state.R[state.local_relation(tree.relation)]
    if isinstance(tree, Intersection):
        vs = np.stack([embed_query(c, state) for c in tree.children])
        return intersect_embed(vs, state.W1, state.b1, state.W2, state.b2)
    if isinstance(tree, UnionQ):
        raise NumericError("union nodes must be rewritten to disjuncts before embedding")
    raise TypeError(f"not a query node: {tree!r}")


def embed_disjuncts(query: Query, state: ModelState) -> np.ndarray:
    """(n_disjuncts, d) embeddings of the query's disjunctive form."""
    return np.stack([embed_query(dj, state) for dj in to_dnf(query)])


def score_entities(qvec: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Negative euclidean distance of one query vector to every row of E."""
    diff = E - qvec
    return -np.sqrt(np.einsum("ij,ij->i", diff, diff))


def score_query(query: Query, state: ModelState) -> np.ndarray:
    """Per-local-entity score, max over disjuncts for union queries."""
    qs = embed_disjuncts(query, state)
    return np.max(np.stack([score_entities(q, state.E) for q in qs]), axis=0)


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """AdamW with decoupled weight decay over a named parameter dict."""

    def __init__(self, cfg: AdamWConfig, params: dict):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.lr * ((m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class PrivacyConfig:
    """Per-coordinate clipping plus Laplace noise on uploaded deltas.

    lam == 0 means clip-only (no noise); the privacy budget is then reported
    as unbounded.
    """

    clip: float = 0.1
    lam: float = 0.2

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigError(f"clip bound must be > 0, got {self.clip}")
        if self.lam < 0:
            raise ConfigError(f"noise scale must be >= 0, got {self.lam}")

    @property
    def epsilon(self) -> float:
        if self.lam == 0:
            return float("inf")
        return 2.0 * self.clip / self.lam


def privatize(delta: np.ndarray, privacy: PrivacyConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip each coordinate to [-clip, clip], then add Laplace(0, lam) noise."""
    clipped = np.clip(delta, -privacy.clip, privacy.clip)
    if privacy.lam == 0:
        return clipped
    return clipped + rng.laplace(0.0, privacy.lam, size=clipped.shape)


def sample_negatives(
    answer_locals: set, n_local: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k local entity ids outside the answer set (uniform with rejection).

    Falls back to uniform over everything when answers cover the graph.
    """
    if n_local < 1:
        raise NumericError("no entities to sample negatives from")
    out = np.empty(k, dtype=np.int64)
    exhaustive = len(answer_locals) >= n_local
    for i in range(k):
        for _ in range(1000):
            cand = int(rng.integers(n_local))
            if exhaustive or cand not in answer_locals:
                out[i] = cand
                break
        else:
            out[i] = int(rng.integers(n_local))
    return out


def make_batch(
    samples: Sequence[QuerySample],
    state: ModelState,
    rng: np.random.Generator,
    k_negatives: int,
) -> CompiledBatch:
    """Compile training samples: one positive drawn from each sample's train
    answers, k negatives drawn outside them."""
    if not samples:
        raise NumericError("empty batch")
    queries = []
    pos = []
    negs = []
    for s in samples:
        if not s.answers_train:
            raise NumericError(f"sample has no train answers: {s.qtype}")
        answers = sorted(s.answers_train)
        target = answers[int(rng.integers(len(answers)))]
        answer_locals = {state.eidx[a] for a in answers if a in state.eidx}
        queries.append(s.query)
        pos.append(state.local_entity(target))
        negs.append(sample_negatives(answer_locals, len(state.entity_ids), k_negatives, rng))
    return compile_batch(queries, pos, np.stack(negs), state.eidx, state.ridx)


MAGIC = b"FNGDB01\n"


def dump_arrays(arrays: dict, meta: dict) -> bytes:
    """Deterministic binary container: magic, JSON header, raw C-order bytes.

    Byte-identical for identical inputs (no timestamps, sorted keys).
    """
    names = list(arrays.keys())
    header = {
        "meta": meta,
        "arrays": [
            {
                "name": name,
                "dtype": str(arrays[name].dtype),
                "shape": list(arrays[name].shape),
            }
            for name in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, len(blob).to_bytes(8, "big"), blob]
    for name in names:
        parts.append(np.ascontiguousarray(arrays[name]).tobytes())
    return b"".join(parts)


def parse_arrays(data: bytes, source: str = "<bytes>") -> tuple[dict, dict]:
    if data[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"{source}: not a model container (bad magic)")
    off = len(MAGIC)
    n = int.from_bytes(data[off : off + 8], "big")
    off += 8
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        raw = data[off : off + nbytes]
        if len(raw) != nbytes:
            raise ConfigError(f"{source}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        off += nbytes
    return arrays, header["meta"]


def save_arrays(path: Path | str, arrays: dict, meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_arrays(arrays, meta))


def load_arrays(path: Path | str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_arrays(data, source=str(path))


def save_checkpoint(
    path: Path | str,
    state: ModelState,
    optimizer: Optional[AdamW] = None,
    rng: Optional[np.random.Generator] = None,
    meta: Optional[dict] = None,
) -> None:
    arrays = {
        "entity_ids": state.entity_ids,
        "relation_ids": state.relation_ids,
        "E": state.E,
        "R": state.R,
        "W1": state.W1,
        "b1": state.b1,
        "W2": state.W2,
        "b2": state.b2,
    }
    header_meta = dict(meta or {})
    if optimizer is not None:
        header_meta["optimizer"] = {
            "t": optimizer.t,
            "lr": optimizer.cfg.lr,
            "beta1": optimizer.cfg.beta1,
            "beta2": optimizer.cfg.beta2,
            "eps": optimizer.cfg.eps,
            "weight_decay": optimizer.cfg.weight_decay,
        }
        for name in sorted(optimizer.m):
            arrays[f"adam_m_{name}"] = optimizer.m[name]
            arrays[f"adam_v_{name}"] = optimizer.v[name]
    if rng is not None:
        header_meta["rng_state"] = rng.bit_generator.state
    save_arrays(path, arrays, header_meta)


def load_checkpoint(path: Path | str):
    """Returns (state, optimizer or None, rng or None, meta)."""
    arrays, meta = load_arrays(path)
    state = ModelState(
        arrays["entity_ids"],
        arrays["relation_ids"],
        arrays["E"],
        arrays["R"],
        arrays["W1"],
        arrays["b1"],
        arrays["W2"],
        arrays["b2"],
    )
    meta = dict(meta)
    optimizer = None
    if "optimizer" in meta:
        ocfg = meta.pop("optimizer")
        optimizer = AdamW(
            AdamWConfig(
                lr=ocfg["lr"],
                beta1=ocfg["beta1"],
                beta2=ocfg["beta2"],
                eps=ocfg["eps"],
                weight_decay=ocfg["weight_decay"],
            ),
            state.params(),
        )
        optimizer.load_state_dict(
            {
                "t": ocfg["t"],
                "m": {k: arrays[f"adam_m_{k}"] for k in state.params()},
                "v": {k: arrays[f"adam_v_{k}"] for k in state.params()},
            }
        )
    rng = None
    if "rng_state" in meta:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta.pop("rng_state")
    return state, optimizer, rng, meta
