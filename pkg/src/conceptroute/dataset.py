"""Routing data model, file formats, label derivation and synthetic data.

A dataset directory holds ``header.json`` (concept schema and model catalog)
and ``records.jsonl`` (one query per line). Training code works on
``RecordTable``, a column-stacked view of a record list.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

GROUP_NAMES = (
    "tasks",
    "domains",
    "libraries",
    "natural_languages",
    "programming_languages",
    "complexity",
)
COMPLEXITY = "complexity"
COMPLEXITY_LABELS = ("reasoning", "general", "total")

HEADER_FILE = "header.json"
RECORDS_FILE = "records.jsonl"
TRUTH_FILE = "truth.npz"


class SchemaError(ValueError):
    pass


class DataParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelEntry:
    name: str
    input_price: float
    output_price: float
    avg_output_tokens: float
    is_reasoning: bool


@dataclass(frozen=True)
class ModelCatalog:
    """Ordered model list; prices are currency per million tokens."""

    entries: tuple[ModelEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if not names:
            raise ConfigError("catalog is empty")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names in catalog: {names}")
        for e in self.entries:
            if not (e.input_price > 0 and e.output_price > 0 and e.avg_output_tokens > 0):
                raise ConfigError(f"model {e.name!r}: prices and avg_output_tokens must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def reasoning_mask(self) -> np.ndarray:
        return np.array([e.is_reasoning for e in self.entries], dtype=bool)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown model {name!r}") from None

    def to_dict(self) -> list[dict[str, Any]]:
        return [
            {
                "name": e.name,
                "input_price": e.input_price,
                "output_price": e.output_price,
                "avg_output_tokens": e.avg_output_tokens,
                "is_reasoning": e.is_reasoning,
            }
            for e in self.entries
        ]

    @classmethod
    def from_dict(cls, data: Iterable[dict[str, Any]]) -> "ModelCatalog":
        return cls(
            tuple(
                ModelEntry(
                    name=str(d["name"]),
                    input_price=float(d["input_price"]),
                    output_price=float(d["output_price"]),
                    avg_output_tokens=float(d["avg_output_tokens"]),
                    is_reasoning=bool(d["is_reasoning"]),
                )
                for d in data
            )
        )


@dataclass(frozen=True)
class ConceptGroup:
    name: str
    labels: tuple[str, ...]
    kind: str = "binary"

    @property
    def width(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ConceptSchema:
    groups: tuple[ConceptGroup, ...]

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            if g.name not in GROUP_NAMES:
                raise SchemaError(f"unknown concept group {g.name!r}; expected one of {GROUP_NAMES}")
            if g.name in seen:
                raise SchemaError(f"duplicate concept group {g.name!r}")
            seen.add(g.name)
            if g.width == 0:
                raise SchemaError(f"group {g.name!r} has no labels")
            if g.name == COMPLEXITY:
                if g.kind != "continuous" or g.width != 3:
                    raise SchemaError("the complexity group must be continuous with width 3")
            elif g.kind != "binary":
                raise SchemaError(f"group {g.name!r} must be binary; only complexity is continuous")

    @property
    def width(self) -> int:
        return sum(g.width for g in self.groups)

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    def group(self, name: str) -> ConceptGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise SchemaError(f"unknown concept group {name!r}; schema has {self.group_names}")

    def slice(self, name: str) -> slice:
        start = 0
        for g in self.groups:
            if g.name == name:
                return slice(start, start + g.width)
            start += g.width
        raise SchemaError(f"unknown concept group {name!r}; schema has {self.group_names}")

    def concept_names(self) -> list[str]:
        return [f"{g.name}:{lab}" for g in self.groups for lab in g.labels]

    def concept_index(self, group: str, label: str) -> int:
        g = self.group(group)
        if label not in g.labels:
            raise SchemaError(f"group {group!r} has no label {label!r}")
        return self.slice(group).start + g.labels.index(label)

    def binary_mask(self) -> np.ndarray:
        return np.concatenate([np.full(g.width, g.kind == "binary") for g in self.groups])

    def without(self, name: str) -> tuple["ConceptSchema", np.ndarray]:
        """Schema minus one group, plus the column indices that survive."""
        sl = self.slice(name)
        remaining = tuple(g for g in self.groups if g.name != name)
        if not remaining:
            raise ConfigError("cannot remove every concept group")
        keep = np.array([i for i in range(self.width) if not sl.start <= i < sl.stop], dtype=int)
        return ConceptSchema(remaining), keep

    def to_dict(self) -> list[dict[str, Any]]:
        return [{"name": g.name, "labels": list(g.labels), "kind": g.kind} for g in self.groups]

    @classmethod
    def from_dict(cls, data: Iterable[dict[str, Any]]) -> "ConceptSchema":
        return cls(
            tuple(ConceptGroup(d["name"], tuple(d["labels"]), d.get("kind", "binary")) for d in data)
        )


@dataclass
class QueryRecord:
    id: str
    embedding: np.ndarray
    concepts: np.ndarray
    correctness: np.ndarray
    input_tokens: int
    task: str | None = None

    def to_json(self) -> str:
        d: dict[str, Any] = {
            "id": self.id,
            "embedding": [float(v) for v in self.embedding],
            "concepts": [float(v) for v in self.concepts],
            "correctness": [int(v) for v in self.correctness],
            "input_tokens": int(self.input_tokens),
        }
        if self.task is not None:
            d["task"] = self.task
        return json.dumps(d)

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.input_tokens == other.input_tokens
            and self.task == other.task
            and np.array_equal(self.embedding, other.embedding)
            and np.array_equal(self.concepts, other.concepts)
            and np.array_equal(self.correctness, other.correctness)
        )


@dataclass
class RecordTable:
    """Column-stacked records; the form every trainer consumes."""

    ids: list[str]
    embeddings: np.ndarray
    concepts: np.ndarray
    correctness: np.ndarray
    input_tokens: np.ndarray
    tasks: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[QueryRecord]) -> "RecordTable":
        if not records:
            raise ValueError("no records")
        return cls(
            ids=[r.id for r in records],
            embeddings=np.stack([np.asarray(r.embedding, dtype=np.float64) for r in records]),
            concepts=np.stack([np.asarray(r.concepts, dtype=np.float64) for r in records]),
            correctness=np.stack([np.asarray(r.correctness, dtype=np.int8) for r in records]),
            input_tokens=np.array([r.input_tokens for r in records], dtype=np.int64),
            tasks=[r.task for r in records],
        )

    def to_records(self) -> list[QueryRecord]:
        tasks = self.tasks or [None] * len(self)
        return [
            QueryRecord(
                self.ids[i],
                self.embeddings[i].copy(),
                self.concepts[i].copy(),
                self.correctness[i].copy(),
                int(self.input_tokens[i]),
                tasks[i],
            )
            for i in range(len(self))
        ]

    def subset(self, idx) -> "RecordTable":
        idx = np.asarray(idx, dtype=int)
        tasks = self.tasks or [None] * len(self)
        return RecordTable(
            ids=[self.ids[i] for i in idx],
            embeddings=self.embeddings[idx],
            concepts=self.concepts[idx],
            correctness=self.correctness[idx],
            input_tokens=self.input_tokens[idx],
            tasks=[tasks[i] for i in idx],
        )

    def with_concepts(self, concepts: np.ndarray) -> "RecordTable":
        return RecordTable(self.ids, self.embeddings, concepts, self.correctness, self.input_tokens, self.tasks)

    def raw_costs(self, catalog: ModelCatalog) -> np.ndarray:
        return cost_matrix(self.input_tokens, catalog)

    def normalized_costs(self, catalog: ModelCatalog) -> np.ndarray:
        return normalize_costs(self.raw_costs(catalog))


# --------------------------------------------------------------------------
# labels and costs


def derive_complexity_labels(correctness, catalog: ModelCatalog):
    """Failure fractions among reasoning, non-reasoning and all models.

    Accepts one correctness vector or an ``(N, n)`` matrix; returns a
    3-tuple or an ``(N, 3)`` array respectively.
    """
    y = np.asarray(correctness)
    mask = catalog.reasoning_mask
    if y.shape[-1] != len(mask):
        raise SchemaError(f"correctness width {y.shape[-1]} != catalog size {len(mask)}")
    if not mask.any() or mask.all():
        raise ConfigError("complexity labels need at least one reasoning and one non-reasoning model")
    fail = 1.0 - y.astype(np.float64)
    out = np.stack(
        [fail[..., mask].mean(axis=-1), fail[..., ~mask].mean(axis=-1), fail.mean(axis=-1)],
        axis=-1,
    )
    if out.ndim == 1:
        return tuple(float(v) for v in out)
    return out


def cost_vector(record: QueryRecord, catalog: ModelCatalog) -> np.ndarray:
    return cost_matrix(np.array([record.input_tokens]), catalog)[0]


def cost_matrix(input_tokens, catalog: ModelCatalog) -> np.ndarray:
    """Raw currency cost of sending each query to each model, ``(N, n)``."""
    tok = np.asarray(input_tokens, dtype=np.float64).reshape(-1, 1)
    if (tok < 1).any():
        raise ValueError("input_tokens must be >= 1")
    inp = np.array([e.input_price for e in catalog.entries])
    out = np.array([e.avg_output_tokens * e.output_price for e in catalog.entries])
    return (tok * inp + out) / 1e6


def normalize_costs(raw) -> np.ndarray:
    """Divide each query's cost vector by its maximum (works row-wise)."""
    r = np.asarray(raw, dtype=np.float64)
    if not (r > 0).all():
        raise ValueError("costs must be strictly positive")
    return r / r.max(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def split_dataset(n_records: int, seed: int) -> DatasetSplit:
    """Shuffled 80/10/10 split; validation and test get ``floor(n / 10)``."""
    if n_records < 10:
        raise ValueError(f"need at least 10 records to split, got {n_records}")
    perm = np.random.default_rng(seed).permutation(n_records)
    n_val = n_test = n_records // 10
    n_train = n_records - n_val - n_test
    return DatasetSplit(
        train=np.sort(perm[:n_train]),
        validation=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
        seed=seed,
    )


# --------------------------------------------------------------------------
# file io


def _validate(rec: QueryRecord, schema: ConceptSchema, catalog: ModelCatalog, d: int | None) -> None:
    if rec.concepts.shape != (schema.width,):
        raise SchemaError(f"record {rec.id!r}: {rec.concepts.size} concepts, schema width is {schema.width}")
    if rec.correctness.shape != (len(catalog),):
        raise SchemaError(f"record {rec.id!r}: {rec.correctness.size} correctness labels, catalog has {len(catalog)}")
    if d is not None and rec.embedding.shape != (d,):
        raise SchemaError(f"record {rec.id!r}: embedding width {rec.embedding.size}, expected {d}")
    if not set(np.unique(rec.correctness).tolist()) <= {0, 1}:
        raise SchemaError(f"record {rec.id!r}: correctness must be 0/1")
    binary = schema.binary_mask()
    if not np.isin(rec.concepts[binary], (0.0, 1.0)).all():
        raise SchemaError(f"record {rec.id!r}: binary concepts must be exactly 0 or 1")
    cont = rec.concepts[~binary]
    if ((cont < 0) | (cont > 1)).any():
        raise SchemaError(f"record {rec.id!r}: complexity values must lie in [0, 1]")
    if rec.input_tokens < 1:
        raise SchemaError(f"record {rec.id!r}: input_tokens must be positive")


def _parse_line(line: str, lineno: int) -> QueryRecord:
    try:
        d = json.loads(line)
        return QueryRecord(
            id=str(d["id"]),
            embedding=np.asarray(d["embedding"], dtype=np.float64),
            concepts=np.asarray(d["concepts"], dtype=np.float64),
            correctness=np.asarray(d["correctness"], dtype=np.int8),
            input_tokens=int(d["input_tokens"]),
            task=d.get("task"),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataParseError(f"line {lineno}: {exc}") from exc


def load_dataset(path, schema: ConceptSchema, catalog: ModelCatalog) -> list[QueryRecord]:
    """Read a ``records.jsonl`` file, validating every record."""
    records: list[QueryRecord] = []
    ids: set[str] = set()
    d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno)
            if d is None:
                d = rec.embedding.size
            _validate(rec, schema, catalog, d)
            if rec.id in ids:
                raise IntegrityError(f"line {lineno}: duplicate record id {rec.id!r}")
            ids.add(rec.id)
            records.append(rec)
    return records


def save_dataset(
    directory, records: Sequence[QueryRecord], schema: ConceptSchema, catalog: ModelCatalog
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_header(directory / HEADER_FILE, schema, catalog)
    with open(directory / RECORDS_FILE, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return directory


def write_header(path, schema: ConceptSchema, catalog: ModelCatalog) -> None:
    Path(path).write_text(
        json.dumps({"schema": schema.to_dict(), "catalog": catalog.to_dict()}, indent=2) + "\n",
        encoding="utf-8",
    )


def read_header(path) -> tuple[ConceptSchema, ModelCatalog]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return ConceptSchema.from_dict(d["schema"]), ModelCatalog.from_dict(d["catalog"])


def load_dataset_dir(directory) -> tuple[list[QueryRecord], ConceptSchema, ModelCatalog]:
    directory = Path(directory)
    schema, catalog = read_header(directory / HEADER_FILE)
    return load_dataset(directory / RECORDS_FILE, schema, catalog), schema, catalog


def write_npz(path, arrays: dict[str, np.ndarray], extra: dict[str, bytes] | None = None) -> None:
    """``np.savez`` equivalent with sorted members and a fixed timestamp,
    so equal arrays give equal bytes."""
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", stamp), buf.getvalue())
        for name, data in sorted((extra or {}).items()):
            zf.writestr(zipfile.ZipInfo(name, stamp), data)


# --------------------------------------------------------------------------
# synthetic data with planted structure


@dataclass
class GroupSpec:
    name: str
    labels: tuple[str, ...]
    mode: str = "one_hot"  # or "multi_hot"
    rate: float = 0.25


@dataclass
class ModelSpec:
    name: str
    input_price: float
    output_price: float
    avg_output_tokens: float
    is_reasoning: bool
    base_logit: float = 0.0
    difficulty_sensitivity: float = 1.0


@dataclass
class EffectSpec:
    model: str
    group: str
    label: str
    delta: float


@dataclass
class SynthConfig:
    """Generator settings. Success log-odds of model m on a query are
    ``base_logit[m] + sum(delta for active specialist concepts) -
    difficulty_sensitivity[m] * z`` with latent difficulty ``z ~ N(0, s^2)``.
    """

    groups: list[GroupSpec]
    models: list[ModelSpec]
    effects: list[EffectSpec] = field(default_factory=list)
    n_records: int = 5000
    embedding_dim: int = 64
    embedding_noise: float = 0.1
    complexity_noise: float = 0.0
    identity_embedding: bool = False
    difficulty_std: float = 1.0
    token_range: tuple[int, int] = (50, 2000)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        d = dict(d)
        groups = [GroupSpec(g["name"], tuple(g["labels"]), g.get("mode", "one_hot"), g.get("rate", 0.25)) for g in d.pop("groups")]
        models = [ModelSpec(**m) for m in d.pop("models")]
        effects = [EffectSpec(**e) for e in d.pop("effects", [])]
        if "token_range" in d:
            d["token_range"] = tuple(d["token_range"])
        return cls(groups=groups, models=models, effects=effects, **d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "groups": [{"name": g.name, "labels": list(g.labels), "mode": g.mode, "rate": g.rate} for g in self.groups],
            "models": [vars(m).copy() for m in self.models],
            "effects": [vars(e).copy() for e in self.effects],
            "n_records": self.n_records,
            "embedding_dim": self.embedding_dim,
            "embedding_noise": self.embedding_noise,
            "complexity_noise": self.complexity_noise,
            "identity_embedding": self.identity_embedding,
            "difficulty_std": self.difficulty_std,
            "token_range": list(self.token_range),
        }

    def replace(self, **changes) -> "SynthConfig":
        d = self.to_dict()
        d.update(changes)
        return SynthConfig.from_dict(d)


@dataclass
class PlantedTruth:
    """Generator internals kept for oracle-side checks."""

    base_logits: np.ndarray  # (n,)
    sensitivities: np.ndarray  # (n,)
    effects: np.ndarray  # (k, n); zero rows for complexity
    difficulty: np.ndarray  # (N,)
    success_prob: np.ndarray  # (N, n)
    embedding_map: np.ndarray  # (k, d)
    difficulty_std: float

    def success_logits(self, binary_concepts: np.ndarray, difficulty) -> np.ndarray:
        c = np.atleast_2d(binary_concepts)
        return self.base_logits + c @ self.effects - np.reshape(difficulty, (-1, 1)) * self.sensitivities

    def specialists(self, concept_index: int, top: int = 3) -> np.ndarray:
        """Models with the largest planted boost for one concept."""
        return np.argsort(-self.effects[concept_index], kind="stable")[:top]

    def save(self, path) -> None:
        write_npz(path, {k: np.asarray(v) for k, v in vars(self).items()})

    @classmethod
    def load(cls, path) -> "PlantedTruth":
        with np.load(path) as z:
            d = {k: z[k] for k in z.files}
        d["difficulty_std"] = float(d["difficulty_std"])
        return cls(**d)


def _schema_from_config(cfg: SynthConfig) -> ConceptSchema:
    groups = [ConceptGroup(g.name, tuple(g.labels), "binary") for g in cfg.groups if g.name != COMPLEXITY]
    groups.append(ConceptGroup(COMPLEXITY, COMPLEXITY_LABELS, "continuous"))
    return ConceptSchema(tuple(groups))


def synthesize_dataset(
    cfg: SynthConfig, seed: int
) -> tuple[list[QueryRecord], ConceptSchema, ModelCatalog, PlantedTruth]:
    """Draw a labeled routing dataset whose structure is known exactly.

    Binary concepts are sampled per group, correctness is sampled from the
    planted success probabilities, complexity is derived from the sampled
    correctness, and embeddings are ``(concepts + complexity noise) @ map``
    plus isotropic noise. The map has orthonormal rows, so the noise level
    is also the per-concept noise seen by a linear decoder.
    """
    schema = _schema_from_config(cfg)
    catalog = ModelCatalog(
        tuple(
            ModelEntry(m.name, m.input_price, m.output_price, m.avg_output_tokens, m.is_reasoning)
            for m in cfg.models
        )
    )
    k, n, N, d = schema.width, len(catalog), cfg.n_records, cfg.embedding_dim
    if d < k:
        raise ConfigError(f"embedding_dim {d} is smaller than the concept width {k}")
    if cfg.identity_embedding and d != k:
        raise ConfigError("identity_embedding requires embedding_dim == concept width")
    effects = np.zeros((k, n))
    for e in cfg.effects:
        try:
            ci = schema.concept_index(e.group, e.label)
        except SchemaError as exc:
            raise ConfigError(f"effect for model {e.model!r}: {exc}") from None
        if e.group == COMPLEXITY:
            raise ConfigError("effects cannot target complexity; it is derived from correctness")
        effects[ci, catalog.index(e.model)] += e.delta

    rng = np.random.default_rng(seed)
    concepts = np.zeros((N, k))
    for g in cfg.groups:
        sl = schema.slice(g.name)
        if g.mode == "one_hot":
            pick = rng.integers(0, len(g.labels), size=N)
            concepts[np.arange(N), sl.start + pick] = 1.0
        elif g.mode == "multi_hot":
            concepts[:, sl] = (rng.random((N, len(g.labels))) < g.rate).astype(float)
        else:
            raise ConfigError(f"group {g.name!r}: unknown mode {g.mode!r}")
    base = np.array([m.base_logit for m in cfg.models], dtype=np.float64)
    sens = np.array([m.difficulty_sensitivity for m in cfg.models], dtype=np.float64)
    z = rng.normal(0.0, cfg.difficulty_std, size=N)
    with np.errstate(invalid="ignore"):
        logits = base + concepts @ effects - z[:, None] * sens
    prob = 1.0 / (1.0 + np.exp(-logits))
    correctness = (rng.random((N, n)) < prob).astype(np.int8)
    cx = schema.slice(COMPLEXITY)
    concepts[:, cx] = derive_complexity_labels(correctness, catalog)

    if cfg.identity_embedding:
        emap = np.eye(k)
    else:
        q, _ = np.linalg.qr(rng.normal(size=(d, k)))
        emap = q.T
    latent = concepts.copy()
    if cfg.complexity_noise > 0:
        latent[:, cx] += rng.normal(0.0, cfg.complexity_noise, size=(N, 3))
    emb = latent @ emap
    if cfg.embedding_noise > 0:
        emb += rng.normal(0.0, cfg.embedding_noise, size=emb.shape)

    lo, hi = cfg.token_range
    tokens = np.round(np.exp(rng.uniform(math.log(lo), math.log(hi), size=N))).astype(np.int64)
    task_slice = schema.slice("tasks") if "tasks" in schema.group_names else None
    records = []
    for i in range(N):
        task = None
        if task_slice is not None:
            active = np.flatnonzero(concepts[i, task_slice])
            task = schema.group("tasks").labels[active[0]] if active.size else None
        records.append(QueryRecord(f"q{i:06d}", emb[i], concepts[i], correctness[i], int(tokens[i]), task))
    truth = PlantedTruth(base, sens, effects, z, prob, emap, cfg.difficulty_std)
    return records, schema, catalog, truth
