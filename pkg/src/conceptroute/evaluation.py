"""Routing metrics, Pareto frontiers and the concept-level studies.

Accuracy is the correctness bit of the chosen model. Costs reported here are
raw currency per query; normalized costs only exist inside training.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import defaults
from .dataset import COMPLEXITY, ConceptSchema, ModelCatalog, RecordTable, SchemaError
from .numerics import softmax
from .routers import BottleneckRouter, ContractError, choose, oracle_decisions
from .significance import SignificanceResult, mann_whitney_u, t_test_two_tailed
from .training import HeadOverrides, RunSet, concept_config, suitability_config, train_bottleneck

REPORT_COLUMNS = ["policy", "condition", "lambda", "seed_count", "acc_mean", "acc_std", "cost_mean", "cost_std"]


def _decisions(decisions, n_models: int, n_records: int) -> np.ndarray:
    d = np.array([-1 if v is None else v for v in decisions], dtype=np.int64)
    if d.shape != (n_records,):
        raise ContractError(f"{d.size} decisions for {n_records} records")
    if ((d < -1) | (d >= n_models)).any():
        raise ContractError(f"decision index out of range [0, {n_models})")
    return d


def routing_accuracy(decisions, records: RecordTable) -> float:
    """Mean correctness of the chosen model; ``None``/-1 counts as wrong."""
    y = records.correctness
    d = _decisions(decisions, y.shape[1], y.shape[0])
    ok = d >= 0
    hits = np.zeros(len(d))
    hits[ok] = y[np.flatnonzero(ok), d[ok]]
    return float(hits.mean())


def mean_routed_cost(decisions, records: RecordTable, catalog: ModelCatalog) -> float:
    """Mean raw cost of the chosen model; an absent choice is billed at the
    cheapest model's price."""
    raw = records.raw_costs(catalog)
    d = _decisions(decisions, raw.shape[1], raw.shape[0])
    cost = raw.min(axis=1)
    ok = d >= 0
    cost[ok] = raw[np.flatnonzero(ok), d[ok]]
    return float(cost.mean())


def assignment_share(decisions, n_models: int) -> np.ndarray:
    d = np.asarray(decisions, dtype=np.int64)
    if d.size == 0:
        raise ValueError("no decisions")
    d = d[d >= 0]
    return np.bincount(d, minlength=n_models) / d.size


def oracle_accuracy(records: RecordTable, catalog: ModelCatalog) -> tuple[float, float]:
    dec = oracle_decisions(records.correctness, records.raw_costs(catalog))
    return routing_accuracy(dec, records), mean_routed_cost(dec, records, catalog)


def _std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if v.size > 1 else 0.0


# --------------------------------------------------------------------------
# frontiers


@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    acc_mean: float
    acc_std: float
    cost_mean: float
    cost_std: float
    seed_count: int
    policy: str = ""

    def row(self, condition: str = "") -> dict[str, Any]:
        return {
            "policy": self.policy,
            "condition": condition,
            "lambda": self.lam,
            "seed_count": self.seed_count,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "cost_mean": self.cost_mean,
            "cost_std": self.cost_std,
        }


def frontier_points(runs: RunSet) -> list[FrontierPoint]:
    out = []
    for lam in runs.grid:
        ok = runs.at(lam)
        if not ok:
            continue
        acc = [r.accuracy for r in ok]
        cost = [r.cost for r in ok]
        out.append(FrontierPoint(lam, float(np.mean(acc)), _std(acc), float(np.mean(cost)), _std(cost), len(ok), runs.policy))
    return out


def _dominates(p: FrontierPoint, q: FrontierPoint) -> bool:
    return (
        p.cost_mean <= q.cost_mean
        and p.acc_mean >= q.acc_mean
        and (p.cost_mean < q.cost_mean or p.acc_mean > q.acc_mean)
    )


def pareto_frontier(points: Sequence[FrontierPoint]) -> list[FrontierPoint]:
    """Undominated points (lower cost and higher accuracy win), by cost."""
    if not points:
        raise ValueError("no points")
    keep = [p for p in points if not any(_dominates(q, p) for q in points)]
    return sorted(keep, key=lambda p: (p.cost_mean, -p.acc_mean))


def mean_shares(runs: RunSet) -> dict[float, np.ndarray]:
    return {lam: np.mean([r.shares for r in runs.at(lam)], axis=0) for lam in runs.grid if runs.at(lam)}


def compare_runsets(a: RunSet, b: RunSet) -> list[dict[str, Any]]:
    """Per-lambda accuracy comparison of two policies (two-tailed Welch t and
    Mann-Whitney U over seeds)."""
    rows = []
    for lam in a.grid:
        xa = [r.accuracy for r in a.at(lam)]
        xb = [r.accuracy for r in b.at(lam)]
        if len(xa) < 2 or len(xb) < 2:
            continue
        try:
            t = t_test_two_tailed(xa, xb)
            t_stat, t_p = t.statistic, t.p_value
        except ValueError:  # both samples constant and different
            t_stat, t_p = None, None
        u = mann_whitney_u(xa, xb)
        rows.append(
            {
                "lambda": lam,
                "policy_a": a.policy,
                "policy_b": b.policy,
                "acc_mean_a": float(np.mean(xa)),
                "acc_std_a": _std(xa),
                "acc_mean_b": float(np.mean(xb)),
                "acc_std_b": _std(xb),
                "t_statistic": t_stat,
                "t_p_value": t_p,
                "u_statistic": u.statistic,
                "u_p_value": u.p_value,
            }
        )
    return rows


# --------------------------------------------------------------------------
# concept metrics


def concept_metrics(predictions, gold, schema: ConceptSchema) -> dict[str, dict[str, Any]]:
    """Per-group concept quality.

    Binary groups: micro-averaged accuracy, precision, recall and F1 at a
    0.5 threshold. Precision (recall) is 0 with ``undefined`` flagged when
    there are no predicted (gold) positives. Complexity: MSE and MAE.
    """
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gold, dtype=np.float64))
    if p.shape != g.shape or p.shape[1] != schema.width:
        raise SchemaError(f"prediction shape {p.shape}, gold shape {g.shape}, schema width {schema.width}")
    out: dict[str, dict[str, Any]] = {}
    for grp in schema.groups:
        sl = schema.slice(grp.name)
        ps, gs = p[:, sl], g[:, sl]
        if grp.name == COMPLEXITY:
            err = ps - gs
            out[grp.name] = {"mse": float(np.mean(err**2)), "mae": float(np.mean(np.abs(err)))}
            continue
        pb, gb = ps > 0.5, gs > 0.5
        tp = int(np.sum(pb & gb))
        fp = int(np.sum(pb & ~gb))
        fn = int(np.sum(~pb & gb))
        undefined = []
        if tp + fp == 0:
            undefined.append("precision")
        if tp + fn == 0:
            undefined.append("recall")
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[grp.name] = {
            "accuracy": float(np.mean(pb == gb)),
            "precision": prec,
            "recall": rec,
            "f1": f1,
            "undefined": undefined,
        }
    return out


# --------------------------------------------------------------------------
# studies


@dataclass
class StudyRow:
    condition: str
    lam: float
    values: list[float]
    costs: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return _std(self.values)

    def row(self, policy: str = "bottleneck") -> dict[str, Any]:
        return {
            "policy": policy,
            "condition": self.condition,
            "lambda": self.lam,
            "seed_count": len(self.values),
            "acc_mean": self.mean,
            "acc_std": self.std,
            "cost_mean": float(np.mean(self.costs)) if self.costs else "",
            "cost_std": _std(self.costs) if self.costs else "",
        }


@dataclass
class StudyReport:
    kind: str  # ablation | intervention | counterfactual | assignment_share
    rows: list[StudyRow]
    baseline: str = "baseline"
    extra: dict[str, Any] = field(default_factory=dict)

    def get(self, condition: str, lam: float | None = None) -> StudyRow:
        for r in self.rows:
            if r.condition == condition and (lam is None or r.lam == lam):
                return r
        raise KeyError((condition, lam))

    def delta(self, condition: str, lam: float | None = None) -> float:
        return self.get(condition, lam).mean - self.get(self.baseline, lam).mean

    def table(self) -> list[dict[str, Any]]:
        return [r.row() for r in self.rows]


def _score(router, test: RecordTable, catalog: ModelCatalog) -> tuple[float, float]:
    dec = choose(router, test.embeddings)
    return routing_accuracy(dec, test), mean_routed_cost(dec, test, catalog)


def ablation_study(
    data: RecordTable,
    split,
    schema: ConceptSchema,
    catalog: ModelCatalog,
    groups: Sequence[str],
    lambdas: Sequence[float] = defaults.STUDY_LAMBDAS,
    seeds: int | Sequence[int] = defaults.N_SEEDS,
    overrides: HeadOverrides | None = None,
) -> StudyReport:
    """Retrain both heads without each group and compare to the full schema."""
    groups = [groups] if isinstance(groups, str) else list(groups)
    reduced = {g: schema.without(g) for g in groups}
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    ov = overrides or HeadOverrides()
    train, val, test = data.subset(split.train), data.subset(split.validation), data.subset(split.test)
    acc: dict[tuple[str, float], list[float]] = {}
    cost: dict[tuple[str, float], list[float]] = {}
    conditions = [("baseline", schema, None)] + [(g, s, keep) for g, (s, keep) in reduced.items()]
    for seed in seed_list:
        for name, sch, keep in conditions:
            tr, va, te = (train, val, test) if keep is None else (
                train.with_concepts(train.concepts[:, keep]),
                val.with_concepts(val.concepts[:, keep]),
                test.with_concepts(test.concepts[:, keep]),
            )
            h = None
            for lam in lambdas:
                router, h_res, _ = train_bottleneck(
                    tr, va, sch, catalog,
                    concept_config(seed=seed, **ov.concept),
                    suitability_config(lam=lam, seed=seed, **ov.suitability),
                    concept_head=h,
                )
                h = router.concept_head
                a, c = _score(router, te, catalog)
                acc.setdefault((name, lam), []).append(a)
                cost.setdefault((name, lam), []).append(c)
    rows = [StudyRow(name, lam, acc[(name, lam)], cost[(name, lam)]) for name, _, _ in conditions for lam in lambdas]
    return StudyReport("ablation", rows)


def intervention_study(
    routers: BottleneckRouter | Sequence[BottleneckRouter], test: RecordTable, groups: str | Sequence[str]
) -> StudyReport:
    """Replace one group's predicted concepts with gold values at inference."""
    routers = [routers] if isinstance(routers, BottleneckRouter) else list(routers)
    groups = [groups] if isinstance(groups, str) else list(groups)
    lam = float(routers[0].metadata.get("lambda", 0.0))
    base_acc, base_cost = [], []
    per_group: dict[str, tuple[list[float], list[float]]] = {g: ([], []) for g in groups}
    for r in routers:
        if not isinstance(r, BottleneckRouter):
            raise ContractError("intervention needs concept-bottleneck routers")
        pred = r.predict_concepts(test.embeddings)
        dec = np.argmax(r.suitability_from_concepts(pred), axis=1)
        base_acc.append(routing_accuracy(dec, test))
        base_cost.append(mean_routed_cost(dec, test, r.catalog))
        for g in groups:
            edited = r.edit_concepts(pred, g, test.concepts[:, r.schema.slice(g)])
            dec_g = np.argmax(r.suitability_from_concepts(edited), axis=1)
            per_group[g][0].append(routing_accuracy(dec_g, test))
            per_group[g][1].append(mean_routed_cost(dec_g, test, r.catalog))
    rows = [StudyRow("baseline", lam, base_acc, base_cost)]
    rows += [StudyRow(g, lam, a, c) for g, (a, c) in per_group.items()]
    return StudyReport("intervention", rows)


def counterfactual_vectors(
    schema: ConceptSchema,
    language: str,
    n_samples: int,
    seed: int,
    fixed: dict[str, str] | None = None,
    group: str = "programming_languages",
) -> np.ndarray:
    """Concept vectors with one active label per fixed group, no libraries,
    the given language, and complexity drawn uniformly from [0, 1]."""
    if language not in schema.group(group).labels:
        raise SchemaError(f"{language!r} is not a label of group {group!r}")
    fixed = dict(fixed or {})
    c = np.zeros((n_samples, schema.width))
    for g in schema.groups:
        if g.name in (group, COMPLEXITY, "libraries"):
            continue
        label = fixed.get(g.name, g.labels[0])
        c[:, schema.concept_index(g.name, label)] = 1.0
    c[:, schema.concept_index(group, language)] = 1.0
    if COMPLEXITY in schema.group_names:
        rng = np.random.default_rng(seed)
        c[:, schema.slice(COMPLEXITY)] = rng.random((n_samples, 3))
    return c


def _ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of each model per row (1 = highest), ties by index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)
    return ranks


def counterfactual_flip_study(
    router: BottleneckRouter,
    source: str,
    target: str,
    top_models: Sequence[int | str],
    n_samples: int = 1000,
    seed: int = 0,
    fixed: dict[str, str] | None = None,
    group: str = "programming_languages",
) -> StudyReport:
    """Flip the language concept from ``source`` to ``target``.

    Reports the change (percentage points) in summed selection probability of
    ``top_models`` and their mean rank improvement. Selection probability is
    ``softmax`` over the suitability logits, the same distribution the cost
    term uses during training.
    """
    names = router.catalog.names
    top = [names.index(m) if isinstance(m, str) else int(m) for m in top_models]
    src = counterfactual_vectors(router.schema, source, n_samples, seed, fixed, group)
    tgt = router.edit_concepts(src, group, counterfactual_vectors(router.schema, target, 1, seed, fixed, group)[0, router.schema.slice(group)])
    z_src = router.suitability_logits(src)
    z_tgt = router.suitability_logits(tgt)
    p_src = softmax(z_src)[:, top].sum(axis=1)
    p_tgt = softmax(z_tgt)[:, top].sum(axis=1)
    r_src = _ranks(z_src)[:, top].mean(axis=1)
    r_tgt = _ranks(z_tgt)[:, top].mean(axis=1)
    dec_src = np.argmax(z_src, axis=1)
    dec_tgt = np.argmax(z_tgt, axis=1)
    rows = [
        StudyRow("selection_prob_delta_pp", 0.0, [float(np.mean(p_tgt - p_src) * 100.0)]),
        StudyRow("rank_improvement", 0.0, [float(np.mean(r_src - r_tgt))]),
    ]
    extra = {
        "source": source,
        "target": target,
        "top_models": [names[i] for i in top],
        "decisions_source": dec_src,
        "decisions_target": dec_tgt,
        "switched_to_top": float(np.mean(np.isin(dec_tgt, top))),
    }
    return StudyReport("counterfactual", rows, baseline="", extra=extra)


def assignment_share_study(runs: RunSet, catalog: ModelCatalog) -> StudyReport:
    rows = []
    for lam, shares in mean_shares(runs).items():
        for name, s in zip(catalog.names, shares):
            rows.append(StudyRow(name, lam, [float(s)]))
    return StudyReport("assignment_share", rows, baseline="")


# --------------------------------------------------------------------------
# throughput


def throughput_benchmark(router, embeddings, repetitions: int = 10) -> dict[str, float]:
    """Time batched routing of ``embeddings``; single-threaded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    x = np.asarray(embeddings, dtype=np.float64)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        choose(router, x)
        times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    best = float(np.min(times))
    return {
        "n_queries": int(x.shape[0]),
        "repetitions": repetitions,
        "mean_seconds": mean,
        "best_seconds": best,
        "queries_per_second": x.shape[0] / mean if mean > 0 else float("inf"),
    }


# --------------------------------------------------------------------------
# report files


def write_table(path, rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(REPORT_COLUMNS)
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def read_table(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def significance_rows(results: Sequence[SignificanceResult]) -> list[dict[str, Any]]:
    return [
        {"test": r.test, "statistic": r.statistic, "p_value": r.p_value, "n_a": r.n_a, "n_b": r.n_b}
        for r in results
    ]
