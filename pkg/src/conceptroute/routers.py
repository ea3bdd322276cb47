"""Routing policies.

Every routable policy exposes ``scores(embeddings) -> (N, n)`` suitability
in [0, 1]; the decision is the argmax, ties going to the lowest catalog
index. The bottleneck router additionally exposes its concept stage so
concepts can be inspected, edited and fed back in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import COMPLEXITY, ConceptSchema, ModelCatalog, SchemaError
from .numerics import DenseParams, ParamSet, ShapeError, mlp_forward, sigmoid


class RouterStateError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


def _batch(x, width: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != width:
        raise ShapeError(f"expected width {width}, got {arr.shape[1]}")
    return arr, single


class BottleneckRouter:
    """Concept head ``h`` (d -> k) followed by suitability head ``g`` (k -> n)."""

    kind = "bottleneck"

    def __init__(
        self,
        concept_head: DenseParams,
        suitability_head: DenseParams,
        schema: ConceptSchema,
        catalog: ModelCatalog,
        metadata: dict[str, Any] | None = None,
    ):
        if concept_head.out_dim != schema.width:
            raise ShapeError(f"concept head emits {concept_head.out_dim} concepts, schema width is {schema.width}")
        if suitability_head.in_dim != schema.width:
            raise ShapeError(f"suitability head takes {suitability_head.in_dim} inputs, schema width is {schema.width}")
        if suitability_head.out_dim != len(catalog):
            raise ShapeError(f"suitability head emits {suitability_head.out_dim} scores, catalog has {len(catalog)}")
        self.concept_head = concept_head
        self.suitability_head = suitability_head
        self.schema = schema
        self.catalog = catalog
        self.metadata = dict(metadata or {})

    @property
    def input_dim(self) -> int:
        return self.concept_head.in_dim

    def predict_concepts(self, embeddings) -> np.ndarray:
        x, single = _batch(embeddings, self.input_dim)
        out, _ = mlp_forward(self.concept_head, x)
        c = sigmoid(out)
        return c[0] if single else c

    def suitability_logits(self, concepts) -> np.ndarray:
        c, single = _batch(concepts, self.schema.width)
        out, _ = mlp_forward(self.suitability_head, c)
        return out[0] if single else out

    def suitability_from_concepts(self, concepts) -> np.ndarray:
        return sigmoid(self.suitability_logits(concepts))

    def scores(self, embeddings) -> np.ndarray:
        return self.suitability_from_concepts(self.predict_concepts(embeddings))

    def edit_concepts(self, concepts, group: str, override) -> np.ndarray:
        """Copy of ``concepts`` with one group's slice replaced."""
        sl = self.schema.slice(group)
        ov = np.asarray(override, dtype=np.float64)
        c = np.array(concepts, dtype=np.float64, copy=True)
        if ov.shape[-1] != sl.stop - sl.start:
            raise ShapeError(f"override for {group!r} has width {ov.shape[-1]}, group width is {sl.stop - sl.start}")
        if ((ov < 0) | (ov > 1)).any():
            raise ValueError("override entries must lie in [0, 1]")
        c[..., sl] = ov
        return c


class BlackBoxRouter:
    kind = "blackbox"

    def __init__(self, head: DenseParams, catalog: ModelCatalog, metadata: dict[str, Any] | None = None):
        if head.out_dim != len(catalog):
            raise ShapeError(f"head emits {head.out_dim} scores, catalog has {len(catalog)}")
        self.head = head
        self.catalog = catalog
        self.metadata = dict(metadata or {})

    @property
    def input_dim(self) -> int:
        return self.head.in_dim

    def logits(self, embeddings) -> np.ndarray:
        x, single = _batch(embeddings, self.input_dim)
        out, _ = mlp_forward(self.head, x)
        return out[0] if single else out

    def scores(self, embeddings) -> np.ndarray:
        return sigmoid(self.logits(embeddings))


class KnnRouter:
    """Per-model success rate among the ``k`` nearest training queries."""

    kind = "knn"

    def __init__(self, embeddings, correctness, k: int, catalog: ModelCatalog, metadata: dict[str, Any] | None = None):
        emb = np.asarray(embeddings, dtype=np.float32)
        y = np.asarray(correctness, dtype=np.int8)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise RouterStateError("KNN router needs a non-empty training set")
        if y.shape != (emb.shape[0], len(catalog)):
            raise ShapeError(f"correctness shape {y.shape} does not match {emb.shape[0]} x {len(catalog)}")
        if not 1 <= k <= emb.shape[0]:
            raise ValueError(f"neighbor count {k} must lie in [1, {emb.shape[0]}]")
        self.embeddings = emb
        self.correctness = y
        self.k = int(k)
        self.catalog = catalog
        self.metadata = dict(metadata or {})

    @property
    def input_dim(self) -> int:
        return self.embeddings.shape[1]

    def neighbors(self, embeddings) -> np.ndarray:
        x, _ = _batch(embeddings, self.input_dim)
        ref = self.embeddings.astype(np.float64)
        out = np.empty((x.shape[0], self.k), dtype=np.int64)
        for start in range(0, x.shape[0], 256):
            dist = cdist(x[start : start + 256], ref, "sqeuclidean")
            out[start : start + 256] = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
        return out

    def scores(self, embeddings) -> np.ndarray:
        single = np.ndim(embeddings) == 1
        nb = self.neighbors(embeddings)
        s = self.correctness[nb].astype(np.float64).mean(axis=1)
        return s[0] if single else s


@dataclass
class FactorizationParams(ParamSet):
    """Query projection network plus one learned vector per model."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    model_emb: np.ndarray

    @property
    def projection(self) -> DenseParams:
        return DenseParams(self.w1, self.b1, self.w2, self.b2)

    @classmethod
    def init(cls, in_dim: int, hidden: int, model_dim: int, n_models: int, rng: np.random.Generator) -> "FactorizationParams":
        p = DenseParams.glorot(in_dim, hidden, model_dim, rng)
        emb = rng.normal(0.0, 1.0 / np.sqrt(model_dim), size=(n_models, model_dim))
        return cls(p.w1, p.b1, p.w2, p.b2, emb)


class FactorizationRouter:
    """Score = sigmoid(projected query . model embedding)."""

    kind = "factorization"

    def __init__(self, params: FactorizationParams, catalog: ModelCatalog, metadata: dict[str, Any] | None = None):
        if params.model_emb.shape[0] != len(catalog):
            raise ShapeError(f"{params.model_emb.shape[0]} model embeddings for {len(catalog)} catalog models")
        if params.model_emb.shape[1] != params.w2.shape[1]:
            raise ShapeError("projection width does not match model embedding width")
        self.params = params
        self.catalog = catalog
        self.metadata = dict(metadata or {})

    @property
    def input_dim(self) -> int:
        return self.params.w1.shape[0]

    def logits(self, embeddings) -> np.ndarray:
        x, single = _batch(embeddings, self.input_dim)
        q, _ = mlp_forward(self.params.projection, x)
        out = q @ self.params.model_emb.T.astype(np.float64)
        return out[0] if single else out

    def scores(self, embeddings) -> np.ndarray:
        return sigmoid(self.logits(embeddings))


class RandomRouter:
    """Uniform choice; the same seed and batch give the same choices."""

    kind = "random"

    def __init__(self, catalog: ModelCatalog, seed: int = 0):
        self.catalog = catalog
        self.seed = int(seed)
        self.metadata: dict[str, Any] = {"seed": self.seed}

    def scores(self, embeddings) -> np.ndarray:
        single = np.ndim(embeddings) == 1
        n_rows = 1 if single else np.shape(embeddings)[0]
        s = np.random.default_rng(self.seed).random((n_rows, len(self.catalog)))
        return s[0] if single else s


class OracleRouter:
    """Hindsight policy; needs correctness labels, so it cannot route queries."""

    kind = "oracle"

    def __init__(self, catalog: ModelCatalog):
        self.catalog = catalog
        self.metadata: dict[str, Any] = {}

    def scores(self, embeddings):
        raise ContractError("the oracle policy needs correctness labels; use oracle_assign")


def oracle_assign(correctness, raw_costs) -> int | None:
    """Cheapest model that answered correctly, or ``None`` if none did."""
    y = np.asarray(correctness)
    c = np.asarray(raw_costs, dtype=np.float64)
    if y.shape != c.shape:
        raise ShapeError(f"correctness shape {y.shape} != cost shape {c.shape}")
    ok = np.flatnonzero(y == 1)
    if ok.size == 0:
        return None
    return int(ok[np.argmin(c[ok])])


def oracle_decisions(correctness, raw_costs) -> np.ndarray:
    """Row-wise ``oracle_assign``; -1 marks queries no model answered."""
    y = np.asarray(correctness)
    c = np.where(y == 1, np.asarray(raw_costs, dtype=np.float64), np.inf)
    out = np.argmin(c, axis=1)
    out[~(y == 1).any(axis=1)] = -1
    return out


# --------------------------------------------------------------------------
# decisions


@dataclass
class RoutingDecision:
    index: int
    model: str
    scores: np.ndarray
    concepts: np.ndarray | None = None
    rationale: dict[str, Any] | None = None
    intervened: list[str] = field(default_factory=list)


def argmax_lowest(scores) -> np.ndarray | int:
    """Argmax with ties resolved to the lowest index (numpy's first-hit rule)."""
    s = np.asarray(scores)
    if s.ndim == 1:
        return int(np.argmax(s))
    return np.argmax(s, axis=1)


def rationale(schema: ConceptSchema, concepts) -> dict[str, Any]:
    """Active binary concepts (> 0.5) by name, complexity as raw values."""
    c = np.asarray(concepts, dtype=np.float64)
    out: dict[str, Any] = {}
    for g in schema.groups:
        vals = c[schema.slice(g.name)]
        if g.name == COMPLEXITY:
            out[g.name] = {lab: float(v) for lab, v in zip(g.labels, vals)}
        else:
            out[g.name] = [lab for lab, v in zip(g.labels, vals) if v > 0.5]
    return out


def _decision_from_concepts(router: BottleneckRouter, concepts: np.ndarray, intervened: list[str]) -> RoutingDecision:
    scores = router.suitability_from_concepts(concepts)
    idx = argmax_lowest(scores)
    return RoutingDecision(
        index=idx,
        model=router.catalog.names[idx],
        scores=scores,
        concepts=concepts,
        rationale=rationale(router.schema, concepts),
        intervened=intervened,
    )


def route(policy, embedding) -> RoutingDecision:
    if policy is None:
        raise RouterStateError("no routing policy loaded")
    if isinstance(policy, OracleRouter):
        raise ContractError("the oracle policy needs correctness labels; use oracle_assign")
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1:
        raise ShapeError("route takes a single embedding vector")
    if isinstance(policy, BottleneckRouter):
        return _decision_from_concepts(policy, policy.predict_concepts(emb), [])
    scores = policy.scores(emb)
    idx = argmax_lowest(scores)
    return RoutingDecision(index=idx, model=policy.catalog.names[idx], scores=scores)


def route_with_intervention(router: BottleneckRouter, embedding, group: str, override) -> RoutingDecision:
    """Route after replacing one concept group's predictions with ``override``."""
    if not isinstance(router, BottleneckRouter):
        raise ContractError("intervention needs a concept-bottleneck router")
    check_group(router.schema, group)
    concepts = router.edit_concepts(router.predict_concepts(embedding), group, override)
    return _decision_from_concepts(router, concepts, [group])


def choose(policy, embeddings) -> np.ndarray:
    """Batch decisions for evaluation."""
    if isinstance(policy, OracleRouter):
        raise ContractError("the oracle policy needs correctness labels; use oracle_decisions")
    return np.atleast_1d(argmax_lowest(policy.scores(embeddings)))


def param_count(router) -> int:
    if isinstance(router, BottleneckRouter):
        return router.concept_head.n_params + router.suitability_head.n_params
    if isinstance(router, BlackBoxRouter):
        return router.head.n_params
    if isinstance(router, FactorizationRouter):
        return router.params.n_params
    if isinstance(router, ParamSet):
        return router.n_params
    if isinstance(router, (KnnRouter, RandomRouter, OracleRouter)):
        return 0
    raise TypeError(f"cannot count parameters of {type(router).__name__}")


def dense_param_count(in_dim: int, hidden: int, out_dim: int) -> int:
    return in_dim * hidden + hidden + hidden * out_dim + out_dim


def freeze(params: ParamSet) -> ParamSet:
    """Cast a trained parameter set to the float32 checkpoint precision."""
    return params.astype(np.float32)


def check_group(schema: ConceptSchema, group: str) -> None:
    if group not in schema.group_names:
        raise SchemaError(f"unknown concept group {group!r}; schema has {schema.group_names}")
