"""Metric formulas, filtered ranking convention, report assembly, baselines."""

import csv
import json
import math

import numpy as np
import pytest

from fedngdb.errors import EvaluationError
from fedngdb.evalbench import (
    BenchmarkSet,
    DEFAULT_KS,
    _check_bound,
    build_benchmark,
    config_digest,
    evaluate,
    filtered_rank_fn,
    metric_value,
    query_metric,
    uniform_rank_baseline,
)
from fedngdb.federation import run_baseline, run_training
from fedngdb.queries import CROSS_GRAPH, IN_GRAPH, Anchor, Projection, QuerySample
from fedngdb.retrieval import ScoreTable

from .test_federation import make_config, make_shards


def make_sample(qtype="1p", locality=IN_GRAPH, client_id=0, train=(), val=(), test=(1,), query=None):
    return QuerySample(
        query=query if query is not None else Projection(0, Anchor(0)),
        qtype=qtype,
        locality=locality,
        client_id=client_id,
        answers_train=frozenset(train),
        answers_val=frozenset(val),
        answers_test=frozenset(test),
    )


# ---------------------------------------------------------------------------
# metric formulas


def test_metric_value_formulas():
    assert metric_value("mrr", 1) == 1.0
    assert metric_value("mrr", 4) == 0.25
    assert metric_value("hr@3", 3) == 1.0
    assert metric_value("hr@3", 4) == 0.0
    assert metric_value("hr@1", 2) == 0.0
    with pytest.raises(EvaluationError):
        metric_value("ndcg", 1)


def test_query_metric_single_answer_rank_one():
    sample = make_sample(test=(7,))
    ranks = {7: 1}
    assert query_metric(sample, lambda v: ranks[v], "mrr") == 1.0
    assert query_metric(sample, lambda v: ranks[v], "hr@3") == 1.0


def test_query_metric_two_answers_ranks_one_two():
    sample = make_sample(test=(7, 9))
    ranks = {7: 1, 9: 2}
    assert query_metric(sample, lambda v: ranks[v], "mrr") == 0.75


def test_query_metric_rank_four():
    sample = make_sample(test=(7,))
    ranks = {7: 4}
    assert query_metric(sample, lambda v: ranks[v], "hr@3") == 0.0
    assert query_metric(sample, lambda v: ranks[v], "mrr") == 0.25


def test_query_metric_novel_answers_only():
    # validation answers are excluded from the target set
    sample = make_sample(val=(7,), test=(7, 9))
    ranks = {9: 2}
    assert query_metric(sample, lambda v: ranks[v], "mrr") == 0.5


def test_query_metric_empty_novel_set():
    sample = make_sample(val=(7,), test=(7,))
    with pytest.raises(EvaluationError, match="novel"):
        query_metric(sample, lambda v: 1, "mrr")


def test_filtered_rank_convention():
    # scores: 4 > 3 > 2 > 1 > 0; knowns 4 and 3 filter each other out
    table = ScoreTable(
        entity_ids=np.arange(5), scores=np.arange(5, dtype=float), coverage=np.ones(5, dtype=np.int64)
    )
    sample = make_sample(train=(4,), test=(3, 1))
    rank = filtered_rank_fn(table, sample)
    assert rank(3) == 1  # 4 (train) and 1 (other test answer) removed
    assert rank(1) == 2  # 4 and 3 removed, 2 still outranks


# ---------------------------------------------------------------------------
# bound check


def test_mrr_hr_bound_accepts_consistent_metrics():
    _check_bound({"hr@3": 0.5, "mrr": 0.6}, (3,), "t")  # 0.6 <= 0.5 + 0.125
    _check_bound({"hr@1": 1.0, "mrr": 1.0}, (1,), "t")


def test_mrr_hr_bound_rejects_impossible_metrics():
    with pytest.raises(EvaluationError, match="bound"):
        _check_bound({"hr@3": 0.0, "mrr": 0.5}, (3,), "t")


# ---------------------------------------------------------------------------
# analytic random baseline


def test_uniform_rank_baseline_small_cases():
    mean, sigma = uniform_rank_baseline([1])
    assert mean == 1.0 and sigma == 0.0
    mean, sigma = uniform_rank_baseline([2])
    assert mean == pytest.approx(0.75)
    assert sigma == pytest.approx(0.25)


def test_uniform_rank_baseline_matches_simulation():
    n, m = 50, 4000
    mean, sigma = uniform_rank_baseline([n] * m)
    rng = np.random.default_rng(7)
    ranks = rng.integers(1, n + 1, size=m)
    empirical = np.mean(1.0 / ranks)
    assert abs(empirical - mean) < 3 * sigma


def test_uniform_rank_baseline_validation():
    with pytest.raises(EvaluationError):
        uniform_rank_baseline([])
    with pytest.raises(EvaluationError):
        uniform_rank_baseline([0])


# ---------------------------------------------------------------------------
# benchmark construction


def test_build_benchmark_groups_and_counts():
    shards = make_shards()
    bench = build_benchmark(shards, qtypes=("1p", "2p"), count=2, seed=3)
    counts = bench.counts()
    assert counts[("1p", IN_GRAPH)] == 2 * len(shards)  # per-client count
    assert ("1p", CROSS_GRAPH) in counts or ("2p", CROSS_GRAPH) in counts
    for s in bench.samples:
        assert s.answers_test - s.answers_val


def test_build_benchmark_single_shard_skips_cross():
    shards = make_shards()[:1]
    bench = build_benchmark(shards, qtypes=("1p",), count=2, seed=3)
    assert all(s.locality == IN_GRAPH for s in bench.samples)


# ---------------------------------------------------------------------------
# evaluate: routing, aggregation, reports


@pytest.fixture(scope="module")
def world():
    shards = make_shards()
    bench = build_benchmark(shards, qtypes=("1p", "2i", "2u"), count=3, seed=6)
    state = run_training(make_config(rounds=1), shards)
    return shards, bench, state


def test_evaluate_fedngdb_report_shape(world):
    _, bench, state = world
    report = evaluate(state, bench)
    assert report.mode == "fedngdb"
    assert report.ks == DEFAULT_KS
    assert len(report.config_digest) == 64
    g = report.group("1p", IN_GRAPH)
    assert g.n_evaluated > 0
    for name, v in g.metrics.items():
        assert 0.0 <= v <= 1.0, name
    assert report.overall(IN_GRAPH, "mrr") >= 0.0


def test_evaluate_cross_groups_scored_in_fedngdb(world):
    _, bench, state = world
    report = evaluate(state, bench)
    cross = [g for g in report.groups if g.locality == CROSS_GRAPH]
    assert cross
    assert any(g.metrics is not None for g in cross)


def test_evaluate_deterministic_json(world):
    _, bench, state = world
    a = evaluate(state, bench).to_json()
    b = evaluate(state, bench).to_json()
    assert a == b
    parsed = json.loads(a)
    assert {g["qtype"] for g in parsed["groups"]} <= {"1p", "2i", "2u"}


def test_evaluate_csv_round_trip(world, tmp_path):
    _, bench, state = world
    report = evaluate(state, bench)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(report.groups)
    for row in rows:
        assert row["qtype"] and row["locality"]
        if row["mrr"] != "n/a":
            assert 0.0 <= float(row["mrr"]) <= 1.0


def test_local_mode_cross_not_applicable():
    shards = make_shards()
    bench = build_benchmark(shards, qtypes=("1p", "2p"), count=2, seed=6)
    state = run_baseline("local", make_config(mode="local"), shards)
    report = evaluate(state, bench)
    cross = [g for g in report.groups if g.locality == CROSS_GRAPH]
    assert cross
    for g in cross:
        assert g.not_applicable and g.metrics is None and g.n_evaluated == 0
    in_graph = [g for g in report.groups if g.locality == IN_GRAPH]
    assert any(g.metrics is not None for g in in_graph)


def test_local_mode_not_applicable_cells_in_csv(tmp_path):
    shards = make_shards()
    bench = build_benchmark(shards, qtypes=("1p", "2p"), count=2, seed=6)
    state = run_baseline("local", make_config(mode="local"), shards)
    path = tmp_path / "report.csv"
    evaluate(state, bench).to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cross_rows = [r for r in rows if r["locality"] == CROSS_GRAPH]
    assert cross_rows and all(r["mrr"] == "n/a" for r in cross_rows)


def test_central_mode_answers_cross_queries():
    shards = make_shards()
    bench = build_benchmark(shards, qtypes=("1p", "2p"), count=2, seed=6)
    state = run_baseline("central", make_config(mode="central"), shards)
    report = evaluate(state, bench)
    cross = [g for g in report.groups if g.locality == CROSS_GRAPH]
    assert cross and all(g.metrics is not None for g in cross if g.n_evaluated)


def test_evaluate_counts_errors_and_excludes():
    shards = make_shards()
    state = run_training(make_config(rounds=0), shards)
    good = build_benchmark(shards, qtypes=("1p",), count=2, seed=6).samples
    bad = make_sample(
        qtype="1p",
        locality=CROSS_GRAPH,
        client_id=-1,
        test=(1,),
        query=Projection(99, Anchor(0)),  # relation owned by nobody
    )
    report = evaluate(state, BenchmarkSet(good + [bad]))
    g = report.group("1p", CROSS_GRAPH)
    assert g.n_errors >= 1


def test_all_failing_group_reports_no_metrics():
    shards = make_shards()
    state = run_training(make_config(rounds=0), shards)
    bad = make_sample(
        qtype="2p", locality=CROSS_GRAPH, client_id=-1, test=(1,), query=Projection(99, Anchor(0))
    )
    report = evaluate(state, BenchmarkSet([bad]))
    g = report.group("2p", CROSS_GRAPH)
    assert g.metrics is None and g.n_errors == 1 and g.n_evaluated == 0


def test_missing_group_raises():
    report = evaluate(
        run_training(make_config(rounds=0), make_shards()),
        BenchmarkSet([]),
    )
    with pytest.raises(EvaluationError):
        report.group("1p", IN_GRAPH)


def test_config_digest_tracks_config():
    a = config_digest(make_config())
    b = config_digest(make_config())
    c = config_digest(make_config(rounds=9))
    assert a == b != c
    assert len(a) == 64


def test_in_graph_average_is_per_client_then_unweighted(monkeypatch):
    # client 0 contributes ranks 1 and 4 (mean MRR 0.625), client 1 rank 2
    # (0.5): report must show (0.625 + 0.5)/2 = 0.5625, not the per-sample
    # mean 0.5833...
    import fedngdb.evalbench as eb

    table = ScoreTable(
        entity_ids=np.arange(5),
        scores=np.array([5.0, 4.0, 3.0, 2.0, 1.0]),
        coverage=np.ones(5, dtype=np.int64),
    )
    monkeypatch.setattr(eb, "_score_sample", lambda sample, state, states, ownership: table)
    samples = [
        make_sample(client_id=0, test=(0,)),  # rank 1
        make_sample(client_id=0, test=(3,)),  # rank 4
        make_sample(client_id=1, test=(1,)),  # rank 2
    ]
    state = run_training(make_config(rounds=0), make_shards())
    report = eb.evaluate(state, BenchmarkSet(samples))
    g = report.group("1p", IN_GRAPH)
    assert g.n_evaluated == 3
    assert g.metrics["mrr"] == pytest.approx(0.5625)
    assert g.metrics["hr@1"] == pytest.approx(0.25)  # mean(0.5, 0.0)
