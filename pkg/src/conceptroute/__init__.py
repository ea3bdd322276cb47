"""Cost-aware query routing through an interpretable concept bottleneck."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    ConceptSchema,
    ModelCatalog,
    QueryRecord,
    RecordTable,
    SynthConfig,
    load_dataset,
    load_dataset_dir,
    split_dataset,
    synthesize_dataset,
)
from .routers import (
    BlackBoxRouter,
    BottleneckRouter,
    FactorizationRouter,
    KnnRouter,
    OracleRouter,
    RandomRouter,
    param_count,
    route,
    route_with_intervention,
)
from .training import run_sweep, train_bottleneck, train_policy

__all__ = [
    "BlackBoxRouter",
    "BottleneckRouter",
    "ConceptSchema",
    "FactorizationRouter",
    "KnnRouter",
    "ModelCatalog",
    "OracleRouter",
    "QueryRecord",
    "RandomRouter",
    "RecordTable",
    "SynthConfig",
    "load_checkpoint",
    "load_dataset",
    "load_dataset_dir",
    "param_count",
    "route",
    "route_with_intervention",
    "run_sweep",
    "save_checkpoint",
    "split_dataset",
    "synthesize_dataset",
    "train_bottleneck",
    "train_policy",
]
