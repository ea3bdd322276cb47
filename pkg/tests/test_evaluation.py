import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptroute.dataset import ConfigError, SchemaError
from conceptroute.evaluation import (
    FrontierPoint,
    ablation_study,
    assignment_share,
    concept_metrics,
    counterfactual_flip_study,
    intervention_study,
    mean_routed_cost,
    oracle_accuracy,
    pareto_frontier,
    read_table,
    routing_accuracy,
    throughput_benchmark,
    write_table,
)
from conceptroute.numerics import DenseParams
from conceptroute.routers import BottleneckRouter, ContractError, RandomRouter, choose, oracle_decisions


def pt(cost, acc):
    return FrontierPoint(0.0, acc, 0.0, cost, 0.0, 1)


# -- accuracy and cost ------------------------------------------------------


def test_accuracy_examples(small):
    t = small.test
    y = t.correctness
    solvable = np.flatnonzero(y.any(axis=1))
    sub = t.subset(solvable)
    assert routing_accuracy(oracle_decisions(sub.correctness, sub.raw_costs(small.catalog)), sub) == 1.0
    unsolvable = t.subset(np.flatnonzero(y.min(axis=1) == 0))
    wrong = [int(np.argmin(row)) for row in unsolvable.correctness]
    assert routing_accuracy(wrong, unsolvable) == 0.0
    assert routing_accuracy([None] * len(t), t) == 0.0
    with pytest.raises(ContractError):
        routing_accuracy([len(small.catalog)] * len(t), t)
    with pytest.raises(ContractError):
        routing_accuracy([0], t)


def test_random_policy_accuracy_is_mean_model_accuracy(small):
    t = small.table
    acc = routing_accuracy(choose(RandomRouter(small.catalog, 11), t.embeddings), t)
    p = t.correctness.mean()
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / len(t))


def test_cost_examples(small):
    t, cat = small.test, small.catalog
    raw = t.raw_costs(cat)
    assert mean_routed_cost(raw.argmin(axis=1), t, cat) == pytest.approx(raw.min(axis=1).mean())
    assert mean_routed_cost(raw.argmax(axis=1), t, cat) == pytest.approx(raw.max(axis=1).mean())
    assert mean_routed_cost([3] * len(t), t, cat) == pytest.approx(raw[:, 3].mean())


def test_oracle_dominates_every_fixed_model(small):
    acc, _ = oracle_accuracy(small.test, small.catalog)
    for m in range(len(small.catalog)):
        assert acc >= routing_accuracy([m] * len(small.test), small.test)


# -- pareto -----------------------------------------------------------------


def test_pareto_examples():
    assert pareto_frontier([pt(1, 0.5)]) == [pt(1, 0.5)]
    assert pareto_frontier([pt(2, 0.8), pt(1, 0.9)]) == [pt(1, 0.9)]
    assert pareto_frontier([pt(1, 0.8), pt(2, 0.9), pt(3, 0.85)]) == [pt(1, 0.8), pt(2, 0.9)]
    with pytest.raises(ValueError):
        pareto_frontier([])


@given(st.lists(st.tuples(st.integers(1, 8), st.integers(0, 8)), min_size=1, max_size=12))
def test_pareto_matches_brute_force(pairs):
    points = [pt(c, a / 8) for c, a in pairs]
    front = pareto_frontier(points)
    for p in points:
        dominated = any(
            q.cost_mean <= p.cost_mean and q.acc_mean >= p.acc_mean and (q.cost_mean, q.acc_mean) != (p.cost_mean, p.acc_mean)
            for q in points
        )
        assert (p in front) == (not dominated)
    costs = [p.cost_mean for p in front]
    assert costs == sorted(costs)


# -- shares -----------------------------------------------------------------


def test_assignment_share_examples():
    np.testing.assert_array_equal(assignment_share([2, 2, 2], 4), [0, 0, 1, 0])
    with pytest.raises(ValueError):
        assignment_share([], 3)


def test_uniform_random_shares(small):
    n, x = len(small.catalog), np.zeros((6000, 1))
    share = assignment_share(choose(RandomRouter(small.catalog, 5), x), n)
    assert share.sum() == pytest.approx(1.0)
    sigma = math.sqrt((1 / n) * (1 - 1 / n) / len(x))
    assert np.all(np.abs(share - 1 / n) <= 3 * sigma)


# -- concept metrics --------------------------------------------------------


def test_concept_metrics_examples(small):
    gold = small.test.concepts
    perfect = concept_metrics(gold, gold, small.schema)
    for name, m in perfect.items():
        if name == "complexity":
            assert m == {"mse": 0.0, "mae": 0.0}
        else:
            assert m["accuracy"] == m["precision"] == m["recall"] == m["f1"] == 1.0

    pred = gold.copy()
    pred[:, small.schema.slice("tasks")] = 0.0
    cx = small.schema.slice("complexity")
    pred[:, cx] = gold[:, cx] + 0.1
    m = concept_metrics(pred, gold, small.schema)
    assert m["tasks"]["recall"] == 0.0 and "precision" in m["tasks"]["undefined"]
    assert m["complexity"]["mae"] == pytest.approx(0.1)
    assert m["complexity"]["mse"] == pytest.approx(0.01)
    with pytest.raises(SchemaError):
        concept_metrics(gold[:, :3], gold[:, :3], small.schema)


# -- studies ----------------------------------------------------------------


def test_intervention_with_own_predictions_is_a_no_op(small, small_bottleneck):
    r = small_bottleneck
    own = small.test.with_concepts(r.predict_concepts(small.test.embeddings))
    rep = intervention_study(r, own, list(small.schema.group_names))
    for g in small.schema.group_names:
        assert rep.delta(g) == 0.0


def test_intervention_on_an_ignored_group_is_a_no_op(small, small_bottleneck):
    r = small_bottleneck
    g = r.suitability_head.copy()
    g.w1[small.schema.slice("domains")] = 0.0
    blind = BottleneckRouter(r.concept_head, g, r.schema, r.catalog)
    assert intervention_study(blind, small.test, "domains").delta("domains") == 0.0
    with pytest.raises(SchemaError):
        intervention_study(r, small.test, "nope")


def test_counterfactual_identity_flip_is_zero(small_bottleneck):
    rep = counterfactual_flip_study(small_bottleneck, "python", "python", [0, 1, 2], n_samples=50)
    assert rep.get("selection_prob_delta_pp").mean == 0.0
    assert rep.get("rank_improvement").mean == 0.0
    with pytest.raises(SchemaError):
        counterfactual_flip_study(small_bottleneck, "python", "cobol", [0], n_samples=5)


def test_ablation_rejects_removing_the_only_group(small):
    from conceptroute.dataset import ConceptGroup, ConceptSchema

    only = ConceptSchema((ConceptGroup("tasks", ("a",)),))
    with pytest.raises(ConfigError):
        ablation_study(small.table, small.split, only, small.catalog, "tasks", [0.0], 1)


def test_ablation_report_shape(small):
    from conceptroute.training import HeadOverrides

    ov = HeadOverrides(concept={"max_epochs": 1}, suitability={"max_epochs": 1})
    rep = ablation_study(small.table, small.split, small.schema, small.catalog, "domains", seeds=1, overrides=ov)
    assert [(r.condition, r.lam) for r in rep.rows] == [
        ("baseline", 0.0), ("baseline", 0.1), ("baseline", 4.0),
        ("domains", 0.0), ("domains", 0.1), ("domains", 4.0),
    ]
    assert len(rep.table()) == 6


# -- throughput and files ---------------------------------------------------


def test_throughput_report(small_bottleneck, small):
    out = throughput_benchmark(small_bottleneck, small.test.embeddings, 3)
    assert out["n_queries"] == len(small.test) and out["best_seconds"] <= out["mean_seconds"]
    with pytest.raises(ValueError):
        throughput_benchmark(small_bottleneck, small.test.embeddings, 0)


def test_table_roundtrip(tmp_path):
    rows = [pt(1, 0.5).row("baseline"), pt(2, 0.75).row("baseline")]
    path = write_table(tmp_path / "t.csv", rows)
    back = read_table(path)
    assert [r["acc_mean"] for r in back] == ["0.5", "0.75"]
    assert list(back[0])[:8] == ["policy", "condition", "lambda", "seed_count", "acc_mean", "acc_std", "cost_mean", "cost_std"]


def test_zero_head_routes_to_first_model(small):
    k, n = small.schema.width, len(small.catalog)
    r = BottleneckRouter(DenseParams.zeros(64, 4, k), DenseParams.zeros(k, 4, n), small.schema, small.catalog)
    assert set(choose(r, small.test.embeddings)) == {0}
