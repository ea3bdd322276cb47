"""Training objectives, the minibatch loop and multi-seed lambda sweeps.

Suitability and black-box heads minimise per-model BCE plus ``lam`` times
the expected normalized cost under ``softmax(logits)``. The concept head
minimises BCE against the full concept vector (soft targets for the
complexity ratios). Heads are trained independently; the suitability head
always sees gold concepts.
"""

from __future__ import annotations

import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import defaults
from .dataset import ConceptSchema, DatasetSplit, ModelCatalog, RecordTable
from .numerics import (
    AdamState,
    DenseParams,
    ParamSet,
    TrainingError,
    bce_with_logits,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    softmax,
)
from .routers import (
    BlackBoxRouter,
    BottleneckRouter,
    FactorizationParams,
    FactorizationRouter,
    KnnRouter,
    RandomRouter,
    choose,
    freeze,
)

log = logging.getLogger(__name__)

COST_TERM_NOTE = "expected normalized cost under softmax(suitability logits)"


@dataclass(frozen=True)
class TrainConfig:
    hidden: int
    dropout: float
    lr: float
    batch_size: int
    max_epochs: int = defaults.MAX_EPOCHS
    patience: int = defaults.PATIENCE
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def concept_config(**kw) -> TrainConfig:
    return TrainConfig(**{**defaults.CONCEPT_HEAD, **kw})


def suitability_config(**kw) -> TrainConfig:
    return TrainConfig(**{**defaults.SUITABILITY_HEAD, **kw})


def blackbox_config(**kw) -> TrainConfig:
    return TrainConfig(**{**defaults.BLACKBOX_HEAD, **kw})


def factorization_config(**kw) -> TrainConfig:
    d = {k: v for k, v in defaults.FACTORIZATION_HEAD.items() if k != "model_dim"}
    return TrainConfig(**{**d, **kw})


# --------------------------------------------------------------------------
# objectives


def cost_term(logits, normalized_costs) -> float:
    """Mean over the batch of ``softmax(logits) . costs``."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    c = np.atleast_2d(np.asarray(normalized_costs, dtype=np.float64))
    if z.shape != c.shape:
        raise ValueError(f"logit shape {z.shape} != cost shape {c.shape}")
    return float(np.mean(np.sum(softmax(z) * c, axis=1)))


def cost_term_grad(logits, normalized_costs) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    c = np.atleast_2d(np.asarray(normalized_costs, dtype=np.float64))
    s = softmax(z)
    expected = np.sum(s * c, axis=1, keepdims=True)
    return s * (c - expected) / z.shape[0]


def composite_loss(logits, targets, normalized_costs, lam: float) -> tuple[float, np.ndarray]:
    """BCE + lam * expected cost, with the gradient w.r.t. the logits."""
    bce, grad = bce_with_logits(logits, targets)
    if lam == 0.0:
        return bce, grad
    return bce + lam * cost_term(logits, normalized_costs), grad + lam * cost_term_grad(logits, normalized_costs)


# --------------------------------------------------------------------------
# loop


@dataclass
class CurvePoint:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ParamSet
    curve: list[CurvePoint]
    best_epoch: int
    best_val_loss: float


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, order, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(order), np.random.default_rng(drop)


def fit(
    params: ParamSet,
    step_fn: Callable[[ParamSet, np.ndarray, np.random.Generator], tuple[float, ParamSet]],
    eval_fn: Callable[[ParamSet, str], float],
    n_train: int,
    config: TrainConfig,
    order_rng: np.random.Generator,
    drop_rng: np.random.Generator,
) -> TrainResult:
    """Adam minibatch loop keeping the snapshot with the lowest validation loss.

    ``step_fn(params, batch_idx, rng)`` returns the batch loss and gradients;
    ``eval_fn(params, split)`` returns the dropout-free loss on ``"train"`` or
    ``"val"``. Epoch 0 is the initial snapshot; later epochs record the mean
    minibatch training loss.
    """
    state = AdamState.for_params(params, lr=config.lr)
    val0 = eval_fn(params, "val")
    curve = [CurvePoint(0, eval_fn(params, "train"), val0)]
    best, best_val, best_epoch, stale = params.copy(), val0, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        perm = order_rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss, grads = step_fn(params, idx, drop_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            optimizer_step(state, params, grads)
            total += loss * idx.size
        val = eval_fn(params, "val")
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        curve.append(CurvePoint(epoch, total / n_train, val))
        if val < best_val:
            best, best_val, best_epoch, stale = params.copy(), val, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, curve, best_epoch, best_val)


def train_dense_head(
    x_train: np.ndarray,
    t_train: np.ndarray,
    x_val: np.ndarray,
    t_val: np.ndarray,
    config: TrainConfig,
    costs_train: np.ndarray | None = None,
    costs_val: np.ndarray | None = None,
) -> TrainResult:
    """Two-layer head on ``x -> t`` under the composite objective.

    With ``config.lam == 0`` (or no costs) this is plain multi-label BCE.
    """
    init_rng, order_rng, drop_rng = _streams(config.seed)
    params = DenseParams.init(x_train.shape[1], config.hidden, t_train.shape[1], init_rng)
    lam = config.lam if costs_train is not None else 0.0

    def step(p, idx, rng):
        out, trace = mlp_forward(p, x_train[idx], config.dropout, True, rng)
        loss, g = composite_loss(out, t_train[idx], None if lam == 0 else costs_train[idx], lam)
        return loss, mlp_backward(trace, p, g)

    def evaluate(p, part):
        x, t, c = (x_train, t_train, costs_train) if part == "train" else (x_val, t_val, costs_val)
        out, _ = mlp_forward(p, x)
        return composite_loss(out, t, c, lam)[0]

    result = fit(params, step, evaluate, x_train.shape[0], config, order_rng, drop_rng)
    result.params = freeze(result.params)
    return result


def train_concept_head(train: RecordTable, val: RecordTable, schema: ConceptSchema, config: TrainConfig) -> TrainResult:
    if train.concepts.shape[1] != schema.width:
        raise ValueError(f"records carry {train.concepts.shape[1]} concepts, schema width is {schema.width}")
    return train_dense_head(train.embeddings, train.concepts, val.embeddings, val.concepts, config.with_(lam=0.0))


def train_suitability_head(
    train: RecordTable, val: RecordTable, catalog: ModelCatalog, config: TrainConfig
) -> TrainResult:
    """Gold concepts in, per-model correctness out."""
    return train_dense_head(
        train.concepts,
        train.correctness.astype(np.float64),
        val.concepts,
        val.correctness.astype(np.float64),
        config,
        train.normalized_costs(catalog),
        val.normalized_costs(catalog),
    )


def train_blackbox_head(
    train: RecordTable, val: RecordTable, catalog: ModelCatalog, config: TrainConfig
) -> tuple[BlackBoxRouter, TrainResult]:
    res = train_dense_head(
        train.embeddings,
        train.correctness.astype(np.float64),
        val.embeddings,
        val.correctness.astype(np.float64),
        config,
        train.normalized_costs(catalog),
        val.normalized_costs(catalog),
    )
    meta = {"lambda": config.lam, "seed": config.seed, "config": asdict(config), "cost_term": COST_TERM_NOTE}
    return BlackBoxRouter(res.params, catalog, meta), res


def train_bottleneck(
    train: RecordTable,
    val: RecordTable,
    schema: ConceptSchema,
    catalog: ModelCatalog,
    concept_cfg: TrainConfig,
    suit_cfg: TrainConfig,
    concept_head: DenseParams | None = None,
) -> tuple[BottleneckRouter, TrainResult | None, TrainResult]:
    """Train ``h`` (unless given) and ``g`` independently and pair them."""
    h_res = None
    if concept_head is None:
        h_res = train_concept_head(train, val, schema, concept_cfg)
        concept_head = h_res.params
    g_res = train_suitability_head(train, val, catalog, suit_cfg)
    meta = {
        "lambda": suit_cfg.lam,
        "seed": suit_cfg.seed,
        "concept_config": asdict(concept_cfg),
        "suitability_config": asdict(suit_cfg),
        "cost_term": COST_TERM_NOTE,
    }
    return BottleneckRouter(concept_head, g_res.params, schema, catalog, meta), h_res, g_res


def train_factorization(
    train: RecordTable, val: RecordTable, catalog: ModelCatalog, config: TrainConfig, model_dim: int = 128
) -> tuple[FactorizationRouter, TrainResult]:
    """Query projection and per-model embeddings under BCE on correctness."""
    init_rng, order_rng, drop_rng = _streams(config.seed)
    x_tr, y_tr = train.embeddings, train.correctness.astype(np.float64)
    x_va, y_va = val.embeddings, val.correctness.astype(np.float64)
    params = FactorizationParams.init(x_tr.shape[1], config.hidden, model_dim, len(catalog), init_rng)

    def loss_and_grads(p: FactorizationParams, x, y, training, rng):
        proj = p.projection
        q, trace = mlp_forward(proj, x, config.dropout, training, rng)
        logits = q @ p.model_emb.T
        loss, g = bce_with_logits(logits, y)
        g_emb = g.T @ q
        gp = mlp_backward(trace, proj, g @ p.model_emb)
        return loss, FactorizationParams(gp.w1, gp.b1, gp.w2, gp.b2, g_emb)

    def step(p, idx, rng):
        return loss_and_grads(p, x_tr[idx], y_tr[idx], True, rng)

    def evaluate(p, part):
        x, y = (x_tr, y_tr) if part == "train" else (x_va, y_va)
        return loss_and_grads(p, x, y, False, None)[0]

    res = fit(params, step, evaluate, x_tr.shape[0], config, order_rng, drop_rng)
    res.params = freeze(res.params)
    meta = {"seed": config.seed, "config": asdict(config), "model_dim": model_dim}
    return FactorizationRouter(res.params, catalog, meta), res


def fit_knn(train: RecordTable, catalog: ModelCatalog, k: int = defaults.KNN_NEIGHBORS) -> KnnRouter:
    return KnnRouter(train.embeddings, train.correctness, min(k, len(train)), catalog, {"k": k})


def select_knn_k(
    train: RecordTable, val: RecordTable, catalog: ModelCatalog, candidates: Sequence[int] = (1, 5, 10, 20, 50)
) -> int:
    """Neighbor count with the best validation routing accuracy (lowest k on ties)."""
    best_k, best_acc = None, -1.0
    for k in candidates:
        if k > len(train):
            continue
        dec = choose(fit_knn(train, catalog, k), val.embeddings)
        acc = float(val.correctness[np.arange(len(val)), dec].mean())
        if acc > best_acc:
            best_k, best_acc = k, acc
    return best_k


# --------------------------------------------------------------------------
# sweeps

POLICIES = ("bottleneck", "blackbox", "knn", "factorization", "random")


@dataclass
class HeadOverrides:
    """Per-head config overrides applied on top of the shipped defaults."""

    concept: dict[str, Any] = field(default_factory=dict)
    suitability: dict[str, Any] = field(default_factory=dict)
    blackbox: dict[str, Any] = field(default_factory=dict)
    factorization: dict[str, Any] = field(default_factory=dict)
    knn_k: int = defaults.KNN_NEIGHBORS


def train_policy(
    kind: str,
    train: RecordTable,
    val: RecordTable,
    schema: ConceptSchema,
    catalog: ModelCatalog,
    lam: float = 0.0,
    seed: int = 0,
    overrides: HeadOverrides | None = None,
    concept_head: DenseParams | None = None,
):
    """Train one policy; returns ``(router, curves)`` with curves keyed by head."""
    ov = overrides or HeadOverrides()
    if kind == "bottleneck":
        router, h_res, g_res = train_bottleneck(
            train,
            val,
            schema,
            catalog,
            concept_config(seed=seed, **ov.concept),
            suitability_config(lam=lam, seed=seed, **ov.suitability),
            concept_head=concept_head,
        )
        curves = {"suitability": g_res.curve}
        if h_res is not None:
            curves["concept"] = h_res.curve
        return router, curves
    if kind == "blackbox":
        router, res = train_blackbox_head(train, val, catalog, blackbox_config(lam=lam, seed=seed, **ov.blackbox))
        return router, {"blackbox": res.curve}
    if kind == "factorization":
        cfg = factorization_config(seed=seed, **ov.factorization)
        router, res = train_factorization(train, val, catalog, cfg, defaults.FACTORIZATION_HEAD["model_dim"])
        return router, {"factorization": res.curve}
    if kind == "knn":
        return fit_knn(train, catalog, ov.knn_k), {}
    if kind == "random":
        return RandomRouter(catalog, seed), {}
    raise ValueError(f"unknown policy {kind!r}; expected one of {POLICIES}")


@dataclass
class RunResult:
    lam: float
    seed: int
    accuracy: float | None = None
    cost: float | None = None
    shares: list[float] | None = None
    error: str | None = None
    seconds: float = 0.0
    router: Any = None
    curves: dict[str, list[CurvePoint]] | None = None


@dataclass
class RunSet:
    policy: str
    grid: list[float]
    seeds: list[int]
    split_seed: int
    runs: list[RunResult]

    @property
    def failed(self) -> list[RunResult]:
        return [r for r in self.runs if r.error is not None]

    @property
    def complete(self) -> bool:
        return not self.failed and len(self.runs) == len(self.grid) * len(self.seeds)

    def at(self, lam: float) -> list[RunResult]:
        return [r for r in self.runs if r.lam == lam and r.error is None]


def _evaluate_run(router, test: RecordTable, catalog: ModelCatalog) -> tuple[float, float, list[float]]:
    from .evaluation import assignment_share, mean_routed_cost, routing_accuracy

    dec = choose(router, test.embeddings)
    return (
        routing_accuracy(dec, test),
        mean_routed_cost(dec, test, catalog),
        assignment_share(dec, len(catalog)).tolist(),
    )


def _seed_job(
    policy: str,
    seed: int,
    grid: Sequence[float],
    data: RecordTable,
    split: DatasetSplit,
    schema: ConceptSchema,
    catalog: ModelCatalog,
    overrides: HeadOverrides | None,
    keep_routers: bool,
) -> list[RunResult]:
    """All lambda values for one seed; the concept head is shared across them
    because its objective does not involve lambda."""
    train, val, test = data.subset(split.train), data.subset(split.validation), data.subset(split.test)
    results = []
    shared_h = None
    for lam in grid:
        t0 = time.perf_counter()
        try:
            router, curves = train_policy(policy, train, val, schema, catalog, lam, seed, overrides, shared_h)
            if policy == "bottleneck":
                shared_h = router.concept_head
            acc, cost, shares = _evaluate_run(router, test, catalog)
            results.append(
                RunResult(lam, seed, acc, cost, shares, None, time.perf_counter() - t0,
                          router if keep_routers else None, curves)
            )
        except Exception as exc:  # recorded, not fatal
            log.warning("run lambda=%s seed=%s failed: %s", lam, seed, exc)
            results.append(RunResult(lam, seed, error="".join(traceback.format_exception_only(type(exc), exc)).strip()))
    return results


def run_sweep(
    data: RecordTable,
    split: DatasetSplit,
    schema: ConceptSchema,
    catalog: ModelCatalog,
    grid: Sequence[float] = defaults.DEFAULT_LAMBDA_GRID,
    seeds: int | Sequence[int] = defaults.N_SEEDS,
    policy: str = "bottleneck",
    overrides: HeadOverrides | None = None,
    jobs: int = 1,
    keep_routers: bool = False,
) -> RunSet:
    """Train every ``(lambda, seed)`` pair on one split and score it on the test part."""
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be strictly increasing")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    args = [(policy, s, grid, data, split, schema, catalog, overrides, keep_routers) for s in seed_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_seed_job, *zip(*args)))
    else:
        chunks = [_seed_job(*a) for a in args]
    runs = sorted((r for chunk in chunks for r in chunk), key=lambda r: (r.lam, r.seed))
    return RunSet(policy, grid, seed_list, split.seed, runs)
