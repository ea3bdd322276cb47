"""Shipped defaults: a real-world catalog, head hyperparameters, the lambda
grid and the bundled synthetic generator configuration."""

from __future__ import annotations

from .dataset import EffectSpec, GroupSpec, ModelCatalog, ModelSpec, SynthConfig

# (name, input $/1M, output $/1M, avg output tokens, reasoning)
# Reasoning flags: o-series and Grok models. Public pricing pages do not
# settle Grok 3 / Grok 4 unambiguously; override the catalog when it matters.
_CATALOG_ROWS = [
    ("o1", 15.00, 60.00, 147.79, True),
    ("grok-3", 3.00, 15.00, 375.87, True),
    ("grok-4", 3.00, 15.00, 376.66, True),
    ("gpt-4o", 2.50, 10.00, 266.11, False),
    ("llama-3.1-405b", 4.00, 4.00, 220.99, False),
    ("gpt-4.1", 2.00, 8.00, 188.71, False),
    ("o3", 2.00, 8.00, 187.69, True),
    ("o3-mini", 1.10, 4.40, 208.74, True),
    ("o4-mini", 1.10, 4.40, 170.63, True),
    ("gpt-4.1-mini", 0.40, 1.60, 199.58, False),
    ("grok-3-mini", 0.30, 0.50, 294.25, True),
    ("llama-4-maverick-fp8", 0.15, 0.60, 242.39, False),
    ("gpt-4o-mini", 0.15, 0.60, 219.97, False),
    ("llama-3.3-70b", 0.13, 0.39, 221.77, False),
    ("llama-4-scout", 0.08, 0.30, 306.20, False),
    ("gpt-4.1-nano", 0.10, 0.40, 194.82, False),
]


def default_catalog() -> ModelCatalog:
    return ModelCatalog.from_dict(
        dict(name=n, input_price=i, output_price=o, avg_output_tokens=a, is_reasoning=r)
        for n, i, o, a, r in _CATALOG_ROWS
    )


# Head hyperparameters: hidden, dropout, learning rate, batch size.
CONCEPT_HEAD = dict(hidden=256, dropout=0.1, lr=1e-3, batch_size=24)
SUITABILITY_HEAD = dict(hidden=176, dropout=0.0, lr=1e-3, batch_size=8)
BLACKBOX_HEAD = dict(hidden=384, dropout=0.2, lr=1e-3, batch_size=8)
FACTORIZATION_HEAD = dict(hidden=512, dropout=0.0, lr=1e-3, batch_size=32, model_dim=128)
KNN_NEIGHBORS = 20
MAX_EPOCHS = 100
PATIENCE = 10
N_SEEDS = 5

DEFAULT_LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(10)) + tuple(float(i) for i in range(1, 11))
STUDY_LAMBDAS = (0.0, 0.1, 4.0)

PROGRAMMING_LANGUAGES = ("python", "rust", "php", "lua", "typescript")

# Planted specialists: each language boosts three models and penalizes the rest.
LANGUAGE_SPECIALISTS = {
    "python": ("orion-r", "vega", "lyra"),
    "rust": ("orion", "vega-r", "wren"),
    "php": ("vega", "lyra", "wren"),
    "lua": ("orion-r", "orion", "vega-r"),
    "typescript": ("orion", "lyra", "wren"),
}
COUNTERFACTUAL_PAIRS = (
    ("python", "rust"),
    ("rust", "python"),
    ("php", "lua"),
    ("lua", "php"),
    ("python", "typescript"),
)


def default_synth_config() -> SynthConfig:
    """Six models over four cost tiers, k = 24 concepts.

    Domains carry no planted effect (a null group); programming languages
    carry the strongest specialist structure.
    """
    models = [
        ModelSpec("orion-r", 15.00, 60.00, 150.0, True, base_logit=1.2, difficulty_sensitivity=0.8),
        ModelSpec("orion", 3.00, 15.00, 375.0, False, base_logit=0.6, difficulty_sensitivity=1.2),
        ModelSpec("vega-r", 1.10, 4.40, 200.0, True, base_logit=0.6, difficulty_sensitivity=0.8),
        ModelSpec("vega", 0.40, 1.60, 200.0, False, base_logit=0.2, difficulty_sensitivity=1.2),
        ModelSpec("lyra", 0.15, 0.60, 220.0, False, base_logit=-0.1, difficulty_sensitivity=1.2),
        ModelSpec("wren", 0.08, 0.30, 300.0, False, base_logit=-0.3, difficulty_sensitivity=1.2),
    ]
    groups = [
        GroupSpec("tasks", ("complete", "instruct", "repair", "exec_predict")),
        GroupSpec("domains", ("general", "crypto", "network", "system")),
        GroupSpec("libraries", ("numpy", "pandas", "requests", "cryptography"), mode="multi_hot", rate=0.25),
        GroupSpec("natural_languages", ("en", "es", "hi", "wo")),
        GroupSpec("programming_languages", PROGRAMMING_LANGUAGES),
    ]
    names = [m.name for m in models]
    effects = []
    for lang, specialists in LANGUAGE_SPECIALISTS.items():
        for name in names:
            delta = 1.5 if name in specialists else -1.0
            effects.append(EffectSpec(name, "programming_languages", lang, delta))
    for name in ("orion-r", "vega-r"):
        effects.append(EffectSpec(name, "tasks", "exec_predict", 1.0))
        effects.append(EffectSpec(name, "tasks", "repair", 0.5))
    for name in ("vega", "lyra", "wren"):
        effects.append(EffectSpec(name, "tasks", "repair", -0.3))
        effects.append(EffectSpec(name, "natural_languages", "hi", -0.7))
        effects.append(EffectSpec(name, "natural_languages", "wo", -1.5))
    for name in names:
        effects.append(EffectSpec(name, "libraries", "cryptography", -0.4))
    effects.append(EffectSpec("lyra", "libraries", "pandas", 0.5))
    return SynthConfig(
        groups=groups,
        models=models,
        effects=effects,
        n_records=5000,
        embedding_dim=64,
        embedding_noise=0.1,
        complexity_noise=0.0,
    )
