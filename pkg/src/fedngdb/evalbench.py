"""Ranking metrics over novel answers and per-query-type reports.

A query's metric averages m(rank) over its hard answers (test answers that
were not already answers on the validation graph): m(r) = 1[r <= K] for
HR@K, 1/r for MRR. Ranks use the filtered convention: every other known
answer is removed from the candidate list before ranking the target.

In-graph figures average per client first, then unweighted over clients;
cross-graph figures average over samples. Local mode cannot answer
cross-graph queries and reports them as not-applicable.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import embed_disjuncts
from .errors import EvaluationError, FedngdbError, SamplingError
from .queries import CROSS_GRAPH, IN_GRAPH, QUERY_TYPES, QuerySample, sample_queries
from .retrieval import (
    build_ownership,
    execute_plan,
    plan_query,
    rank_answers,
    score_and_aggregate,
    score_locally,
)

log = logging.getLogger("fedngdb.evalbench")

DEFAULT_KS = (1, 3, 10)
NOT_APPLICABLE = "n/a"


# ---------------------------------------------------------------------------
# benchmark construction


@dataclass
class BenchmarkSet:
    """Evaluation queries grouped by (query type, locality)."""

    samples: list

    def groups(self) -> dict:
        out: dict = {}
        for s in self.samples:
            out.setdefault((s.qtype, s.locality), []).append(s)
        return out

    def counts(self) -> dict:
        return {k: len(v) for k, v in self.groups().items()}


def build_benchmark(
    shards,
    qtypes: Sequence[str] = QUERY_TYPES,
    count: int = 20,
    seed: int = 0,
    localities: Sequence[str] = (IN_GRAPH, CROSS_GRAPH),
    stage: str = "test",
) -> BenchmarkSet:
    """Sample evaluation queries; shapes that exhaust their attempt budget
    contribute what they achieved (with a warning) rather than failing."""
    samples: list = []
    for locality in localities:
        if locality == CROSS_GRAPH and len(shards) < 2:
            continue
        for qtype in qtypes:
            try:
                samples += sample_queries(shards, qtype, count, stage=stage, locality=locality, seed=seed)
            except SamplingError as exc:
                log.warning("benchmark %s/%s: %s", qtype, locality, exc)
                samples += exc.samples
    return BenchmarkSet(samples)


# ---------------------------------------------------------------------------
# per-query metric


def metric_value(metric: str, rank: int) -> float:
    """m(rank): indicator for hr@K, reciprocal rank for mrr."""
    if metric == "mrr":
        return 1.0 / rank
    if metric.startswith("hr@"):
        return 1.0 if rank <= int(metric[3:]) else 0.0
    raise EvaluationError(f"unknown metric {metric!r}")


def query_metric(sample: QuerySample, rank_fn, metric: str) -> float:
    """Mean of m(rank(v)) over the sample's hard answers."""
    hard = sorted(sample.hard_answers)
    if not hard:
        raise EvaluationError(f"sample has no novel answers: {sample.qtype}")
    return sum(metric_value(metric, rank_fn(v)) for v in hard) / len(hard)


def filtered_rank_fn(table, sample: QuerySample):
    """rank(v) with all other known answers removed from the candidates."""
    known = set(sample.answers_train) | set(sample.answers_val) | set(sample.answers_test)

    def rank(v: int) -> int:
        _, fn = rank_answers(table, known - {int(v)})
        return fn(v)

    return rank


# ---------------------------------------------------------------------------
# evaluation over a trained state


def _score_sample(sample: QuerySample, state, states: dict, ownership) -> object:
    """Route one sample to its score table according to the training mode."""
    mode = state.config.mode
    if mode == "central":
        one = state.clients[0].state
        return score_locally(one, embed_disjuncts(sample.query, one))
    if sample.locality == IN_GRAPH:
        if mode == "local":
            local = states[sample.client_id]
            return score_locally(local, embed_disjuncts(sample.query, local))
        plan = plan_query(sample.query, ownership, host=sample.client_id)
        disjuncts = execute_plan(plan, states, state.server_theta)
        return score_locally(states[plan.host] if plan.host is not None else states[sample.client_id], disjuncts)
    # cross-graph
    plan = plan_query(sample.query, ownership)
    disjuncts = execute_plan(plan, states, state.server_theta)
    return score_and_aggregate(disjuncts, states)


@dataclass
class GroupMetrics:
    qtype: str
    locality: str
    n_evaluated: int
    n_errors: int
    metrics: Optional[dict]  # None = not applicable

    @property
    def not_applicable(self) -> bool:
        return self.metrics is None


@dataclass
class MetricsReport:
    mode: str
    seed: int
    config_digest: str
    ks: tuple
    groups: list = field(default_factory=list)

    def group(self, qtype: str, locality: str) -> GroupMetrics:
        for g in self.groups:
            if g.qtype == qtype and g.locality == locality:
                return g
        raise EvaluationError(f"no group ({qtype}, {locality}) in report")

    def overall(self, locality: str, metric: str) -> float:
        vals = [g.metrics[metric] for g in self.groups if g.locality == locality and g.metrics]
        if not vals:
            raise EvaluationError(f"no evaluated groups for locality {locality}")
        return float(np.mean(vals))

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "ks": list(self.ks),
            "groups": [
                {
                    "qtype": g.qtype,
                    "locality": g.locality,
                    "n_evaluated": g.n_evaluated,
                    "n_errors": g.n_errors,
                    "metrics": g.metrics,
                }
                for g in self.groups
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self, path: Path | str) -> None:
        names = [f"hr@{k}" for k in self.ks] + ["mrr"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["qtype", "locality", "n_evaluated", "n_errors"] + names)
            for g in self.groups:
                cells = [g.qtype, g.locality, g.n_evaluated, g.n_errors]
                if g.metrics is None:
                    cells += [NOT_APPLICABLE] * len(names)
                else:
                    cells += [f"{g.metrics[m]:.17g}" for m in names]
                writer.writerow(cells)


def config_digest(config) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _check_bound(metrics: dict, ks, where: str) -> None:
    # 1/r <= 1 when r <= K and 1/r <= 1/(K+1) otherwise, so averaging gives
    # mrr <= hr@K + (1 - hr@K)/(K+1)
    for k in ks:
        limit = metrics[f"hr@{k}"] + (1.0 - metrics[f"hr@{k}"]) / (k + 1)
        if metrics["mrr"] > limit + 1e-12:
            raise EvaluationError(
                f"{where}: mrr {metrics['mrr']} exceeds hr@{k} bound {limit}"
            )


def evaluate(state, benchmark: BenchmarkSet, ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    """Score and rank every benchmark sample under the state's mode and
    aggregate per (query type, locality)."""
    ks = tuple(int(k) for k in ks)
    names = [f"hr@{k}" for k in ks] + ["mrr"]
    mode = state.config.mode
    states = {c.client_id: c.state for c in state.clients}
    ownership = build_ownership(states) if mode != "central" else None
    report = MetricsReport(
        mode=mode, seed=state.config.seed, config_digest=config_digest(state.config), ks=ks
    )
    for (qtype, locality), samples in sorted(benchmark.groups().items()):
        if locality == CROSS_GRAPH and mode == "local":
            report.groups.append(GroupMetrics(qtype, locality, 0, 0, None))
            continue
        per_sample = []
        errors = 0
        for sample in samples:
            try:
                table = _score_sample(sample, state, states, ownership)
                rank_fn = filtered_rank_fn(table, sample)
                per_sample.append(
                    (sample.client_id, {m: query_metric(sample, rank_fn, m) for m in names})
                )
            except FedngdbError as exc:
                errors += 1
                log.warning("skipping %s/%s sample: %s", qtype, locality, exc)
        if not per_sample:
            report.groups.append(GroupMetrics(qtype, locality, 0, errors, None))
            continue
        if locality == IN_GRAPH:
            by_client: dict = {}
            for cid, vals in per_sample:
                by_client.setdefault(cid, []).append(vals)
            client_means = [
                {m: float(np.mean([v[m] for v in vals])) for m in names}
                for _, vals in sorted(by_client.items())
            ]
            agg = {m: float(np.mean([cm[m] for cm in client_means])) for m in names}
        else:
            agg = {m: float(np.mean([v[m] for _, v in per_sample])) for m in names}
        _check_bound(agg, ks, f"{qtype}/{locality}")
        report.groups.append(GroupMetrics(qtype, locality, len(per_sample), errors, agg))
    return report


# ---------------------------------------------------------------------------
# analytic baseline for an untrained / random-scoring model


def uniform_rank_baseline(candidate_counts: Sequence[int]) -> tuple[float, float]:
    """(expected MRR, std of the mean) when ranks are uniform on 1..n per
    query: E[1/r] = H_n / n."""
    if len(candidate_counts) == 0:
        raise EvaluationError("no candidate counts")
    mus = []
    variances = []
    for n in candidate_counts:
        n = int(n)
        if n < 1:
            raise EvaluationError(f"bad candidate count {n}")
        h1 = math.fsum(1.0 / k for k in range(1, n + 1))
        h2 = math.fsum(1.0 / (k * k) for k in range(1, n + 1))
        mu = h1 / n
        mus.append(mu)
        variances.append(h2 / n - mu * mu)
    mean = math.fsum(mus) / len(mus)
    sigma = math.sqrt(math.fsum(variances)) / len(mus)
    return mean, sigma
