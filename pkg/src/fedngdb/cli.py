"""Command-line pipeline: synth, split, sample, train, eval, query.

Each command reads file handoffs from the previous stage, writes its outputs
plus exactly one manifest.json (the only artifact carrying a timestamp), and
follows one exit-code discipline: 0 success, 2 usage, 3 data errors,
4 protocol/training/runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .encoder import ModelState, load_checkpoint, save_arrays, load_arrays, save_checkpoint
from .errors import ConfigError, DataError, FedngdbError, SamplingError
from .evalbench import BenchmarkSet, evaluate
from .federation import FederationConfig, parse_config_file, run_training, save_telemetry
from .graphstore import (
    MODE_RELATION,
    MODE_TRIPLE,
    SplitConfig,
    load_dataset,
    load_shards,
    save_shards,
    split_clients,
    stage_shard,
)
from .queries import CROSS_GRAPH, IN_GRAPH, QUERY_TYPES, query_from_obj, sample_queries, save_samples
from .retrieval import build_ownership, execute_plan, plan_query, rank_answers, score_and_aggregate, score_locally
from .synth import SynthConfig, write_synthetic_tsv

log = logging.getLogger("fedngdb.cli")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging() -> None:
    name = os.environ.get("FEDNGDB_LOG", "warn").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"FEDNGDB_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# manifests


def digest_path(path: Path) -> str:
    """sha256 of a file, or of a directory's sorted (name, file digest) list."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(sub.relative_to(path)).encode())
            h.update(bytes.fromhex(digest_path(sub)))
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs, seed) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): digest_path(p) for p in inputs},
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "artifact_version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = ensure_out(args)
    cfg = SynthConfig(
        n_entities=args.entities,
        n_clusters=args.clusters,
        n_relations=args.relations,
        edges_per_head=args.edges_per_head,
        noise=args.noise,
        head_coverage=args.head_coverage,
        seed=args.seed,
    )
    path = out / "triples.tsv"
    graph, _ = write_synthetic_tsv(path, cfg)
    log.info("wrote %d triples to %s", graph.n_triples, path)
    write_manifest(out, "synth", dataclasses.asdict(cfg), [], [path], args.seed)
    return 0


# ---------------------------------------------------------------------------
# split


def cmd_split(args) -> int:
    out = ensure_out(args)
    graph, vocab = load_dataset(args.data)
    vocab.freeze()
    ratios = parse_ratios(args.ratios)
    cfg = SplitConfig(n_clients=args.clients, mode=args.split_mode, ratios=ratios, seed=args.seed)
    client_graphs = split_clients(graph, cfg)
    shards = [stage_shard(g, ratios, args.seed, client_id=i) for i, g in enumerate(client_graphs)]
    paths = save_shards(shards, out, vocab)
    write_manifest(
        out,
        "split",
        {"n_clients": args.clients, "mode": args.split_mode, "ratios": list(ratios), "seed": args.seed},
        [Path(args.data)],
        paths,
        args.seed,
    )
    return 0


def parse_ratios(text: str) -> tuple:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"bad ratios {text!r}, expected like 0.8,0.1,0.1") from None
    return parts


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    out = ensure_out(args)
    shards, _vocab = load_shards(args.shards)
    qtypes = tuple(args.types.split(","))
    for q in qtypes:
        if q not in QUERY_TYPES:
            raise ConfigError(f"unknown query type {q!r}; known: {','.join(QUERY_TYPES)}")
    stats: dict = {"stage": args.stage, "requested_per_type": args.count, "groups": []}
    outputs = []
    exhausted = False
    localities = [IN_GRAPH] + ([CROSS_GRAPH] if len(shards) > 1 and args.stage == "test" else [])
    if args.count < 0:
        raise ConfigError(f"count must be >= 0, got {args.count}")
    for locality in localities:
        collected = []
        for qtype in qtypes:
            try:
                got = (
                    []
                    if args.count == 0
                    else sample_queries(
                        shards, qtype, args.count, stage=args.stage, locality=locality, seed=args.seed
                    )
                )
            except SamplingError as exc:
                log.warning("%s/%s: %s", qtype, locality, exc)
                got = exc.samples
                exhausted = True
            stats["groups"].append(
                {"qtype": qtype, "locality": locality, "achieved": len(got)}
            )
            collected += got
        path = out / f"benchmark_{args.stage}_{locality}.jsonl"
        save_samples(collected, path)
        outputs.append(path)
    stats_path = out / "stats.json"
    stats_path.write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    outputs.append(stats_path)
    write_manifest(
        out,
        "sample",
        {"types": list(qtypes), "count": args.count, "stage": args.stage, "seed": args.seed},
        [Path(args.shards)],
        outputs,
        args.seed,
    )
    if exhausted:
        raise SamplingError("one or more query shapes exhausted their budget (partial benchmark written)")
    return 0


# ---------------------------------------------------------------------------
# train


def resolve_config(args, n_shards: int) -> FederationConfig:
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "n_clients": args.clients,
        "client_fraction": args.fraction,
        "dim": args.dim,
        "rounds": args.rounds,
        "dp_clip": args.dp_clip,
        "dp_lambda": args.dp_lambda,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        return parse_config_file(args.config, overrides)
    overrides.setdefault("n_clients", n_shards)
    return FederationConfig(**overrides)


def cmd_train(args) -> int:
    out = ensure_out(args)
    shards, vocab = load_shards(args.shards)
    cfg = resolve_config(args, len(shards))
    if cfg.mode != "central" and cfg.n_clients != len(shards):
        raise ConfigError(f"config has n_clients={cfg.n_clients} but {len(shards)} shards loaded")
    state = run_training(cfg, shards)
    outputs = []
    for client in state.clients:
        path = out / f"client_{client.client_id:03d}.ckpt"
        save_checkpoint(path, client.state, client.optimizer, client.rng, meta={"client_id": client.client_id, "round": state.round})
        outputs.append(path)
    if state.server_theta is not None:
        path = out / "server.ckpt"
        arrays = dict(state.server_theta)
        arrays["R"] = state.server_R
        arrays["relation_ids"] = state.relation_registry.global_ids
        save_arrays(path, arrays, meta={"round": state.round})
        outputs.append(path)
    tpath = out / "telemetry.csv"
    save_telemetry(state, tpath)
    outputs.append(tpath)
    for name in ("entities.tsv", "relations.tsv"):
        src = Path(args.shards) / "client_000" / name
        dst = out / name
        shutil.copyfile(src, dst)
        outputs.append(dst)
    write_manifest(out, "train", dataclasses.asdict(cfg), [Path(args.shards)], outputs, cfg.seed)
    return 0


# ---------------------------------------------------------------------------
# eval


@dataclass
class LoadedClient:
    client_id: int
    state: ModelState


@dataclass
class RunBundle:
    config: FederationConfig
    clients: list
    server_theta: Optional[dict]


def load_bundle(run_dir: Path | str) -> RunBundle:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {run_dir}; is this a train output?")
    manifest = json.loads(manifest_path.read_text())
    config = FederationConfig(**manifest["config"])
    clients = []
    for path in sorted(run_dir.glob("client_*.ckpt")):
        state, _opt, _rng, meta = load_checkpoint(path)
        clients.append(LoadedClient(int(meta["client_id"]), state))
    if not clients:
        raise ConfigError(f"no client checkpoints under {run_dir}")
    server_theta = None
    server_path = run_dir / "server.ckpt"
    if server_path.exists():
        arrays, _meta = load_arrays(server_path)
        server_theta = {k: arrays[k] for k in ("W1", "b1", "W2", "b2")}
    return RunBundle(config=config, clients=clients, server_theta=server_theta)


def load_benchmark_dir(path: Path | str) -> BenchmarkSet:
    from .queries import load_samples

    path = Path(path)
    files = sorted(path.glob("benchmark_*.jsonl"))
    if not files:
        raise ConfigError(f"no benchmark_*.jsonl files under {path}")
    samples: list = []
    for f in files:
        samples += load_samples(f)
    return BenchmarkSet(samples)


def parse_k_list(text: str) -> tuple:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"bad k list {text!r}, expected like 1,3,10") from None
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"k values must be >= 1: {text!r}")
    return ks


def cmd_eval(args) -> int:
    out = ensure_out(args)
    bundle = load_bundle(args.run)
    bench = load_benchmark_dir(args.benchmark)
    ks = parse_k_list(args.k_list)
    report = evaluate(bundle, bench, ks=ks)
    jpath = out / "report.json"
    jpath.write_text(report.to_json(), encoding="utf-8")
    cpath = out / "report.csv"
    report.to_csv(cpath)
    for g in report.groups:
        if g.metrics is None:
            line = f"{g.qtype:>3} {g.locality:<11} n={g.n_evaluated:<4} n/a"
        else:
            shown = "  ".join(f"{m}={g.metrics[m] * 100:6.2f}" for m in g.metrics)
            line = f"{g.qtype:>3} {g.locality:<11} n={g.n_evaluated:<4} {shown}"
        print(line)
    write_manifest(
        out,
        "eval",
        {"ks": list(ks), "run": str(args.run), "benchmark": str(args.benchmark)},
        [Path(args.run), Path(args.benchmark)],
        [jpath, cpath],
        bundle.config.seed,
    )
    return 0


# ---------------------------------------------------------------------------
# query


def parse_query_arg(text: str, vocab_dir: Path):
    from .graphstore import Vocabulary

    if text.startswith("@"):
        text = Path(text[1:]).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad query JSON at position {exc.pos}: {exc.msg}") from None
    entities = Vocabulary.load(vocab_dir / "entities.tsv")
    relations = Vocabulary.load(vocab_dir / "relations.tsv")

    def to_ids(node):
        tag = node[0]
        if tag == "a":
            e = node[1]
            return ["a", entities.id_of(e) if isinstance(e, str) else int(e)]
        if tag == "p":
            r = node[1]
            return ["p", relations.id_of(r) if isinstance(r, str) else int(r), to_ids(node[2])]
        if tag in ("i", "u"):
            return [tag] + [to_ids(c) for c in node[1:]]
        raise ConfigError(f"bad query node tag {tag!r}")

    return query_from_obj(to_ids(obj)), entities


def cmd_query(args) -> int:
    run_dir = Path(args.run)
    bundle = load_bundle(run_dir)
    query, entities = parse_query_arg(args.query, run_dir)
    states = {c.client_id: c.state for c in bundle.clients}
    started = time.perf_counter_ns()
    plan = plan_query(query, build_ownership(states))
    disjuncts = execute_plan(plan, states, bundle.server_theta)
    if plan.host is not None:
        table = score_locally(states[plan.host], disjuncts)
    else:
        table = score_and_aggregate(disjuncts, states)
    ranked, _ = rank_answers(table, k=args.k)
    response = {
        "ranked": [[entities.token_of(e), s] for e, s in ranked],
        "plan": plan.trace(),
        "plan_kind": plan.kind,
        "timing_ms": (time.perf_counter_ns() - started) / 1e6,
    }
    print(json.dumps(response, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedngdb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a clustered synthetic knowledge graph")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--edges-per-head", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--head-coverage", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="partition a triple file into staged client shards")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--split-mode", choices=[MODE_RELATION, MODE_TRIPLE], default=MODE_RELATION)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sample", help="sample benchmark queries from shards")
    p.add_argument("--shards", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--types", default=",".join(QUERY_TYPES))
    p.add_argument("--stage", choices=["train", "valid", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="run federated training (or a baseline) over shards")
    p.add_argument("--shards", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["fedngdb", "local", "central"], default=None)
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--dp-clip", type=float, default=None)
    p.add_argument("--dp-lambda", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank benchmark queries against a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", default="1,3,10")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="answer one query against a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--query", required=True, help='JSON tree, e.g. ["p","r1",["a","e007"]] or @file')
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FedngdbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
