"""Router checkpoints.

A checkpoint is a zip of ``.npy`` members (readable with ``np.load``) plus a
``meta.json`` member holding the policy kind, schema, catalog and training
metadata. Members are written in sorted order with a fixed timestamp so that
the same router always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import ConceptSchema, IntegrityError, ModelCatalog, write_npz
from .numerics import DenseParams
from .routers import (
    BlackBoxRouter,
    BottleneckRouter,
    FactorizationParams,
    FactorizationRouter,
    KnnRouter,
    RandomRouter,
)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(router) -> dict[str, np.ndarray]:
    if isinstance(router, BottleneckRouter):
        out = {f"concept_head/{k}": v for k, v in router.concept_head.blocks().items()}
        out.update({f"suitability_head/{k}": v for k, v in router.suitability_head.blocks().items()})
    elif isinstance(router, BlackBoxRouter):
        out = {f"head/{k}": v for k, v in router.head.blocks().items()}
    elif isinstance(router, FactorizationRouter):
        out = {f"params/{k}": v for k, v in router.params.blocks().items()}
    elif isinstance(router, KnnRouter):
        return {"embeddings": router.embeddings, "correctness": router.correctness}
    elif isinstance(router, RandomRouter):
        return {}
    else:
        raise CheckpointError(f"cannot checkpoint {type(router).__name__}")
    return {k: np.asarray(v, dtype=np.float32) for k, v in out.items()}


def _digest(arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> str:
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def checkpoint_version(router) -> str:
    """Content hash identifying a router's parameters and metadata."""
    arrays = _arrays(router)
    return _digest(arrays, _meta(router))


def _meta(router) -> dict[str, Any]:
    meta: dict[str, Any] = {
        "format": FORMAT_VERSION,
        "kind": router.kind,
        "catalog": router.catalog.to_dict(),
        "metadata": router.metadata,
    }
    if isinstance(router, BottleneckRouter):
        meta["schema"] = router.schema.to_dict()
    if isinstance(router, KnnRouter):
        meta["k"] = router.k
    if isinstance(router, RandomRouter):
        meta["seed"] = router.seed
    return meta


def save_checkpoint(router, path) -> str:
    """Write ``router`` to ``path`` and return its version string."""
    arrays = _arrays(router)
    meta = _meta(router)
    version = _digest(arrays, meta)
    meta["version"] = version
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_npz(path, arrays, {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()})
    return version


def _dense(arrays: dict[str, np.ndarray], prefix: str) -> DenseParams:
    return DenseParams(*(arrays[f"{prefix}/{k}"] for k in ("w1", "b1", "w2", "b2")))


def load_checkpoint(path):
    """Rebuild the router stored at ``path``; verifies the stored version hash."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    with zf.open(name) as fh:
                        arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    stored = meta.pop("version", None)
    if stored != _digest(arrays, meta):
        raise IntegrityError(f"{path}: content does not match version {stored!r}")

    catalog = ModelCatalog.from_dict(meta["catalog"])
    md = meta.get("metadata", {})
    kind = meta["kind"]
    try:
        if kind == "bottleneck":
            router = BottleneckRouter(
                _dense(arrays, "concept_head"),
                _dense(arrays, "suitability_head"),
                ConceptSchema.from_dict(meta["schema"]),
                catalog,
                md,
            )
        elif kind == "blackbox":
            router = BlackBoxRouter(_dense(arrays, "head"), catalog, md)
        elif kind == "factorization":
            p = FactorizationParams(*(arrays[f"params/{k}"] for k in ("w1", "b1", "w2", "b2", "model_emb")))
            router = FactorizationRouter(p, catalog, md)
        elif kind == "knn":
            router = KnnRouter(arrays["embeddings"], arrays["correctness"], meta["k"], catalog, md)
        elif kind == "random":
            router = RandomRouter(catalog, meta["seed"])
        else:
            raise CheckpointError(f"{path}: unknown policy kind {kind!r}")
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing member {exc}") from None
    router.version = stored
    return router
