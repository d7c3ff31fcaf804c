"""Federated training orchestration.

One process simulates N clients and a parameter server. Entity embeddings
move through masked secret aggregation (the server only ever sees perturbed
values); operator weights and the relation table are averaged in plaintext.
Per round: a seeded fraction of clients is selected, selected clients unmask
the latest perturbed global table, train locally, privatize their round
delta, and upload; the server aggregates and broadcasts operator weights to
everyone. Local and central baseline modes train without any exchange.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields as dc_fields, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .encoder import (
    AdamW,
    AdamWConfig,
    ModelState,
    PrivacyConfig,
    init_model,
    make_batch,
    privatize,
)
from .errors import ConfigError, NumericError, ProtocolError, SamplingError, TrainingError
from .graphstore import StagedShard, merge_global
from .kernels import batch_loss_grad
from .queries import IN_GRAPH, QUERY_TYPES, QuerySample, derive_seed, sample_queries
from .secureagg import (
    ClientRegistry,
    DEFAULT_GROUP,
    DHParams,
    MaskShare,
    PerturbedTable,
    Transcript,
    build_registry,
    client_unmask,
    masked_upload,
    server_aggregate_entities,
    setup_masks,
)

MODES = ("fedngdb", "local", "central")
PARAM_NAMES = ("E", "R", "W1", "b1", "W2", "b2")
THETA_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class FederationConfig:
    n_clients: int = 3
    client_fraction: float = 1.0
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 64
    dim: int = 400
    margin: float = 1.0
    negatives: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dp_clip: float = 0.1
    dp_lambda: float = 0.2
    dp_per_step: bool = False
    mask_bound: float = 1024.0
    train_queries_per_type: int = 50
    seed: int = 0
    mode: str = "fedngdb"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be >= 0")
        for name in ("batch_size", "dim", "negatives", "train_queries_per_type"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("margin", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.mask_bound < 0:
            raise ConfigError("mask_bound must be >= 0 (0 means plaintext test mode)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.privacy  # validates clip/lambda

    @property
    def privacy(self) -> PrivacyConfig:
        return PrivacyConfig(clip=self.dp_clip, lam=self.dp_lambda)

    @property
    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            weight_decay=self.weight_decay,
        )

    def selected_count(self) -> int:
        return math.ceil(self.n_clients * self.client_fraction)


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_file(path: Path | str, overrides: Optional[dict] = None) -> FederationConfig:
    """Flat `key = value` lines; '#' starts a comment; unknown keys rejected."""
    types = {f.name: f.type for f in dc_fields(FederationConfig)}
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected `key = value`, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in types:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _coerce(key, val, types[key], f"{path}:{line_no}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return FederationConfig(**values)


def _coerce(key: str, val: str, typ, where: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            try:
                return _BOOL_WORDS[val.lower()]
            except KeyError:
                raise ValueError(val)
        if "int" in typ:
            return int(val)
        if "float" in typ:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{where}: bad value for {key!r}: {val!r}") from None


@dataclass
class ClientNode:
    """One simulated participant: private shard, model, optimizer, RNG,
    training queries, own mask, and every peer's mask share."""

    client_id: int
    shard: StagedShard
    state: ModelState
    optimizer: AdamW
    rng: np.random.Generator
    train_samples: list
    mask: Optional[MaskShare] = None
    held_masks: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.state.params().items()},
            "opt": {
                "t": self.optimizer.t,
                "m": {k: v.copy() for k, v in self.optimizer.m.items()},
                "v": {k: v.copy() for k, v in self.optimizer.v.items()},
            },
            "rng": self.rng.bit_generator.state,
        }

    def restore(self, snap: dict) -> None:
        for k, v in snap["params"].items():
            getattr(self.state, k)[...] = v
        self.optimizer.load_state_dict(snap["opt"])
        self.rng.bit_generator.state = snap["rng"]


@dataclass
class FederationState:
    """Everything the simulation holds between rounds.

    In fedngdb mode the server-side fields never contain a plaintext entity
    table: current_table is masked sums, server_theta/server_R are operator
    parameters which are plaintext by design.
    """

    config: FederationConfig
    clients: list
    registry: Optional[ClientRegistry]
    relation_registry: Optional[ClientRegistry]
    server_theta: Optional[dict]
    server_R: Optional[np.ndarray]
    current_table: Optional[PerturbedTable]
    round: int = 0
    telemetry: list = field(default_factory=list)
    transcript: Optional[Transcript] = None
    observer: Optional[Callable] = None
    transmissions: int = 0
    benchmark: object = None

    def client(self, client_id: int) -> ClientNode:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise ConfigError(f"no client {client_id}")

    def _observe(self, round_idx: int, phase: str, sender, arrays) -> None:
        if self.observer is not None:
            self.observer(round_idx, phase, sender, arrays)
        if self.transcript is not None:
            self.transcript.record(round_idx, phase, sender, "server", list(arrays))


def select_clients(n: int, fraction: float, seed: int, round_idx: int) -> list[int]:
    """Seeded sampling without replacement; pure function of its arguments."""
    k = math.ceil(n * fraction)
    rng = np.random.default_rng(derive_seed(seed, "select", round_idx))
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def fedavg(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean accumulated in the given (canonical) order."""
    acc = arrays[0].astype(np.float64).copy()
    for a in arrays[1:]:
        acc += a
    return acc / len(arrays)


def sample_training_queries(shard: StagedShard, per_type: int, seed: int) -> list[QuerySample]:
    """In-graph train-stage queries of every template shape; shapes the shard
    cannot produce in budget contribute what they achieved."""
    out: list[QuerySample] = []
    for qtype in QUERY_TYPES:
        try:
            out += sample_queries([shard], qtype, per_type, stage="train", locality=IN_GRAPH, seed=seed)
        except SamplingError as exc:
            out += exc.samples
    return out


def _init_clients(config: FederationConfig, shards: Sequence[StagedShard]) -> list[ClientNode]:
    clients = []
    for shard in shards:
        cid = shard.client_id
        ents = [int(e) for e in shard.g_test.entities]
        rels = [int(r) for r in shard.g_test.relations]
        state = init_model(ents, rels, config.dim, derive_seed(config.seed, "client-init", cid))
        opt = AdamW(config.optimizer, state.params())
        rng = np.random.default_rng(derive_seed(config.seed, "client-rng", cid))
        samples = sample_training_queries(shard, config.train_queries_per_type, config.seed)
        clients.append(ClientNode(cid, shard, state, opt, rng, samples))
    return clients


def _train_epochs(client: ClientNode, config: FederationConfig, epochs: int) -> float:
    """Run local epochs of minibatch updates; returns the mean batch loss."""
    if not client.train_samples or epochs == 0:
        return 0.0
    losses = []
    params = client.state.params()
    for _ in range(epochs):
        order = client.rng.permutation(len(client.train_samples))
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch_samples = [client.train_samples[int(i)] for i in chunk]
            batch = make_batch(batch_samples, client.state, client.rng, config.negatives)
            loss, *grads = batch_loss_grad(
                batch,
                params["E"],
                params["R"],
                params["W1"],
                params["b1"],
                params["W2"],
                params["b2"],
                config.margin,
            )
            grad_dict = dict(zip(PARAM_NAMES, grads))
            if config.dp_per_step:
                before = {k: v.copy() for k, v in params.items()}
                client.optimizer.step(params, grad_dict)
                for k, v in params.items():
                    step_delta = v - before[k]
                    v[...] = before[k] + privatize(step_delta, config.privacy, client.rng)
            else:
                client.optimizer.step(params, grad_dict)
            # project entity rows onto the unit ball: without a norm cap the
            # margin loss is minimized by inflating all distances uniformly
            norms = np.linalg.norm(params["E"], axis=1, keepdims=True)
            params["E"] /= np.maximum(norms, 1.0)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def client_update(
    client: ClientNode,
    theta_in: dict,
    table_in: Optional[PerturbedTable],
    epochs: int,
    registry: ClientRegistry,
    rel_rows_in: np.ndarray,
    config: FederationConfig,
):
    """One selected client's round: unmask the incoming global table, adopt
    broadcast operator weights, train, privatize the round delta, mask the
    upload. Returns (payload, mean_loss)."""
    if table_in is not None:
        rows, touched = client_unmask(table_in, client.client_id, client.held_masks, registry)
        client.state.E[touched] = rows[touched]
    for name in THETA_NAMES:
        getattr(client.state, name)[...] = theta_in[name]
    client.state.R[...] = rel_rows_in

    e_ref = client.state.E.copy()
    refs = {name: getattr(client.state, name).copy() for name in THETA_NAMES}
    r_ref = client.state.R.copy()

    try:
        loss = _train_epochs(client, config, epochs)
    except NumericError as exc:
        raise TrainingError(f"client {client.client_id}: {exc}") from exc

    privacy = config.privacy
    if config.dp_per_step:
        e_up = client.state.E.copy()
        theta_up = {name: getattr(client.state, name).copy() for name in THETA_NAMES}
        theta_up["R"] = client.state.R.copy()
    else:
        e_up = e_ref + privatize(client.state.E - e_ref, privacy, client.rng)
        theta_up = {
            name: refs[name] + privatize(getattr(client.state, name) - refs[name], privacy, client.rng)
            for name in THETA_NAMES
        }
        theta_up["R"] = r_ref + privatize(client.state.R - r_ref, privacy, client.rng)

    payload = masked_upload(client.client_id, e_up, theta_up, client.mask)
    return payload, loss


def _broadcast_theta(state: FederationState) -> None:
    for client in state.clients:
        for name in THETA_NAMES:
            getattr(client.state, name)[...] = state.server_theta[name]
        rel_rows = state.relation_registry.local_maps[client.client_id]
        client.state.R[...] = state.server_R[rel_rows]
        state.transmissions += 1


def _aggregate_relations(state: FederationState, payloads: list, selected: list[int]) -> np.ndarray:
    """Per-relation plaintext mean over selected holders; zero-count rows
    keep the previous server table."""
    reg = state.relation_registry
    sums = np.zeros_like(state.server_R)
    counts = np.zeros(reg.n_global, dtype=np.int64)
    by_id = {p.client_id: p for p in payloads}
    for cid in selected:
        rows = reg.local_maps[cid]
        sums[rows] += by_id[cid].theta["R"]
        counts[rows] += 1
    out = state.server_R.copy()
    t = counts > 0
    out[t] = sums[t] / counts[t, None]
    return out


def run_round(state: FederationState) -> FederationState:
    """Execute one federated round in place (returns the same state)."""
    config = state.config
    t = state.round
    selected = select_clients(config.n_clients, config.client_fraction, config.seed, t)
    snapshots = {cid: state.client(cid).snapshot() for cid in selected}
    prev_theta = {k: v.copy() for k, v in state.server_theta.items()}
    prev_R = state.server_R.copy()
    prev_table = state.current_table
    prev_tx = state.transmissions
    started = time.perf_counter_ns()
    try:
        payloads = []
        losses = []
        for cid in selected:
            client = state.client(cid)
            rel_rows = state.server_R[state.relation_registry.local_maps[cid]]
            payload, loss = client_update(
                client,
                state.server_theta,
                state.current_table,
                config.local_epochs,
                state.registry,
                rel_rows,
                config,
            )
            state.transmissions += 1
            state._observe(t, "upload", cid, [payload.e_hi, payload.e_lo] + [payload.theta[k] for k in sorted(payload.theta)])
            payloads.append(payload)
            losses.append(loss)
        table = server_aggregate_entities(payloads, state.registry, selected)
        state._observe(t, "aggregate", "server", [table.sum_hi, table.sum_lo])
        state.server_theta = {
            name: fedavg([p.theta[name] for p in payloads]) for name in THETA_NAMES
        }
        state.server_R = _aggregate_relations(state, payloads, selected)
        state.current_table = table
        _broadcast_theta(state)
    except ProtocolError as exc:
        for cid, snap in snapshots.items():
            state.client(cid).restore(snap)
        state.server_theta = prev_theta
        state.server_R = prev_R
        state.current_table = prev_table
        state.transmissions = prev_tx
        raise TrainingError(f"round {t} aborted: {exc}", round_index=t) from exc
    except TrainingError as exc:
        exc.round_index = t
        raise
    wall_ms = (time.perf_counter_ns() - started) / 1e6
    state.telemetry.append(
        {
            "round": t,
            "mean_client_loss": float(np.mean(losses)) if losses else 0.0,
            "selected_clients": " ".join(str(c) for c in selected),
            "wall_ms": wall_ms,
        }
    )
    state.round += 1
    return state


def _setup_federation(
    config: FederationConfig,
    shards: Sequence[StagedShard],
    observer: Optional[Callable],
    transcript: Optional[Transcript],
    dh: DHParams,
) -> FederationState:
    clients = _init_clients(config, shards)
    registry = build_registry({c.client_id: c.state.entity_ids for c in clients})
    rel_registry = build_registry({c.client_id: c.state.relation_ids for c in clients})

    held, _envelopes = setup_masks(
        {c.client_id: c.state.E.shape for c in clients},
        dh=dh,
        seed=config.seed,
        bound=config.mask_bound,
        transcript=transcript,
    )
    for c in clients:
        c.mask = held[c.client_id][c.client_id]
        c.held_masks = held[c.client_id]

    server_rng = np.random.default_rng(derive_seed(config.seed, "server-theta"))
    bound = 1.0 / math.sqrt(config.dim)
    server_theta = {
        "W1": server_rng.uniform(-bound, bound, (config.dim, config.dim)),
        "b1": np.zeros(config.dim),
        "W2": server_rng.uniform(-bound, bound, (config.dim, config.dim)),
        "b2": np.zeros(config.dim),
    }
    server_R = server_rng.uniform(-bound, bound, (rel_registry.n_global, config.dim))

    state = FederationState(
        config=config,
        clients=clients,
        registry=registry,
        relation_registry=rel_registry,
        server_theta=server_theta,
        server_R=server_R,
        current_table=None,
        transcript=transcript,
        observer=observer,
    )

    # initial full-participation sync: everyone uploads its fresh table, the
    # masked mean comes back, and every client starts from the same E
    all_ids = sorted(c.client_id for c in clients)
    payloads = []
    for cid in all_ids:
        c = state.client(cid)
        payload = masked_upload(cid, c.state.E, {}, c.mask)
        state.transmissions += 1
        state._observe(-1, "setup-upload", cid, [payload.e_hi, payload.e_lo])
        payloads.append(payload)
    table = server_aggregate_entities(payloads, registry, all_ids)
    state._observe(-1, "setup-aggregate", "server", [table.sum_hi, table.sum_lo])
    state.current_table = table
    for c in clients:
        rows, touched = client_unmask(table, c.client_id, c.held_masks, registry)
        c.state.E[touched] = rows[touched]
    _broadcast_theta(state)
    return state


def _train_solo(config: FederationConfig, shards: Sequence[StagedShard]) -> FederationState:
    """Shared loop for the local and central baselines: no masks, no
    aggregation, no transmissions; each client just trains for rounds*epochs."""
    clients = _init_clients(config, shards)
    state = FederationState(
        config=config,
        clients=clients,
        registry=None,
        relation_registry=None,
        server_theta=None,
        server_R=None,
        current_table=None,
    )
    for t in range(config.rounds):
        started = time.perf_counter_ns()
        losses = []
        for client in clients:
            try:
                losses.append(_train_epochs(client, config, config.local_epochs))
            except NumericError as exc:
                raise TrainingError(f"client {client.client_id}: {exc}", round_index=t) from exc
        state.telemetry.append(
            {
                "round": t,
                "mean_client_loss": float(np.mean(losses)) if losses else 0.0,
                "selected_clients": " ".join(str(c.client_id) for c in clients),
                "wall_ms": (time.perf_counter_ns() - started) / 1e6,
            }
        )
        state.round += 1
    return state


def run_training(
    config: FederationConfig,
    shards: Sequence[StagedShard],
    benchmark=None,
    observer: Optional[Callable] = None,
    transcript: Optional[Transcript] = None,
    dh: DHParams = DEFAULT_GROUP,
) -> FederationState:
    """Set up the federation (registry, masks, initial sync) and run all
    configured rounds. Deterministic for a fixed config seed."""
    if config.mode != "fedngdb":
        return run_baseline(config.mode, config, shards, benchmark)
    if len(shards) != config.n_clients:
        raise ConfigError(f"{len(shards)} shards but n_clients={config.n_clients}")
    state = _setup_federation(config, shards, observer, transcript, dh)
    state.benchmark = benchmark
    for _ in range(config.rounds):
        run_round(state)
    return state


def run_baseline(mode: str, config: FederationConfig, shards: Sequence[StagedShard], benchmark=None) -> FederationState:
    """local: every client trains alone. central: one model on the merged
    global graph. Neither exchanges any parameters."""
    if mode == "local":
        cfg = replace(config, mode="local")
        state = _train_solo(cfg, shards)
    elif mode == "central":
        cfg = replace(config, mode="central", n_clients=1)
        merged = merge_global(list(shards))
        if merged.client_id < 0:
            merged = StagedShard(0, merged.g_train, merged.g_val, merged.g_test)
        state = _train_solo(cfg, [merged])
    else:
        raise ConfigError(f"unknown baseline mode: {mode!r}")
    state.benchmark = benchmark
    return state


def save_telemetry(state: FederationState, path: Path | str) -> None:
    """CSV: round, mean_client_loss, selected_clients, wall_ms."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["round", "mean_client_loss", "selected_clients", "wall_ms"]
        )
        writer.writeheader()
        for row in state.telemetry:
            out = dict(row)
            out["mean_client_loss"] = f"{row['mean_client_loss']:.17g}"
            out["wall_ms"] = f"{row['wall_ms']:.3f}"
            writer.writerow(out)
