"""Command-line entry point: ``conceptroute <subcommand> ...``.

Options resolve in three layers: built-in defaults, then a JSON ``--config``
file, then explicit flags. Every subcommand that writes into ``--out``
refuses to touch a non-empty directory unless ``--force`` is given, and
leaves a ``manifest.json`` describing inputs, resolved options and output
hashes (no timestamps, so identical runs give identical manifests).

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, defaults
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import (
    TRUTH_FILE,
    ConfigError,
    DataParseError,
    IntegrityError,
    RecordTable,
    SchemaError,
    SynthConfig,
    load_dataset_dir,
    save_dataset,
    split_dataset,
    synthesize_dataset,
)
from .evaluation import (
    ablation_study,
    compare_runsets,
    concept_metrics,
    counterfactual_flip_study,
    frontier_points,
    intervention_study,
    mean_routed_cost,
    oracle_accuracy,
    pareto_frontier,
    read_table,
    routing_accuracy,
    throughput_benchmark,
    write_table,
)
from .numerics import ShapeError
from .routers import BottleneckRouter, ContractError, choose, param_count, route, route_with_intervention
from .service import ServiceConfig, serve
from .training import POLICIES, HeadOverrides, RunResult, RunSet, run_sweep, train_policy

log = logging.getLogger("conceptroute")


class UsageError(Exception):
    pass


USER_ERRORS = (
    UsageError,
    FileNotFoundError,
    FileExistsError,
    IsADirectoryError,
    SchemaError,
    DataParseError,
    IntegrityError,
    ConfigError,
    CheckpointError,
    ContractError,
    ShapeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# option resolution and output bookkeeping

# Built-in defaults per subcommand; anything here can also come from --config.
DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {"spec": None, "n_records": None},
    "train": {"policy": "bottleneck", "lam": 0.0, "max_epochs": None},
    "sweep": {"policy": "bottleneck", "lambda_grid": "default", "seeds": defaults.N_SEEDS, "jobs": 1, "max_epochs": None},
    "eval": {},
    "ablate": {"groups": None, "lambdas": "0,0.1,4", "seeds": defaults.N_SEEDS, "max_epochs": None},
    "intervene": {"groups": "complexity"},
    "counterfactual": {"source": "python", "target": "rust", "top": None, "n_samples": 1000},
    "bench": {"repetitions": 10},
    "route": {"embedding": None, "text": None, "intervene_group": None, "override": None, "verbose": False},
    "serve": {"bind": None, "embed_endpoint": None, "embed_timeout_ms": None, "mock_embeddings": False},
    "report": {"compare": None},
}
COMMON = {"seed": 0, "force": False}


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Defaults < config file < explicit flags."""
    opts = {**COMMON, **DEFAULTS[command]}
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "func", "verbose_log")}
    if ns.config:
        cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        if not isinstance(cfg, dict):
            raise UsageError(f"{ns.config}: config must be a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update(given)
    return opts


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(opts: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in sorted(opts.items()) if k not in ("force", "out")}


def config_hash(opts: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(_jsonable(opts), sort_keys=True, default=str).encode()).hexdigest()


def _inputs(paths: Sequence[str | None]) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        path = Path(p)
        files = sorted(f for f in path.rglob("*") if f.is_file()) if path.is_dir() else [path]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def prepare_out(opts: dict[str, Any]) -> Path:
    if not opts.get("out"):
        raise UsageError("--out is required")
    out = Path(opts["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not opts["force"]:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, opts: dict[str, Any], inputs: Sequence[str | None]) -> Path:
    outputs = {
        str(f.relative_to(out)): _sha256(f) for f in sorted(out.rglob("*")) if f.is_file() and f.name != "manifest.json"
    }
    manifest = {
        "command": command,
        "package_version": __version__,
        "seed": opts["seed"],
        "options": _jsonable(opts),
        "config_hash": config_hash(opts),
        "inputs": _inputs(inputs),
        "outputs": outputs,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_np_default) + "\n", encoding="utf-8")


def _np_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"{type(o).__name__} is not JSON serialisable")


def _require(opts: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_data(opts: dict[str, Any]):
    records, schema, catalog = load_dataset_dir(opts["data"])
    table = RecordTable.from_records(records)
    split = split_dataset(len(table), opts["seed"])
    return table, split, schema, catalog


def _overrides(opts: dict[str, Any]) -> HeadOverrides:
    ov = HeadOverrides(**{k: dict(opts.get(k) or {}) for k in ("concept", "suitability", "blackbox", "factorization")})
    if opts.get("max_epochs"):
        for head in (ov.concept, ov.suitability, ov.blackbox, ov.factorization):
            head.setdefault("max_epochs", int(opts["max_epochs"]))
    if opts.get("knn_k"):
        ov.knn_k = int(opts["knn_k"])
    return ov


def _floats(spec) -> list[float]:
    if spec in (None, "default"):
        return list(defaults.DEFAULT_LAMBDA_GRID)
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    try:
        return [float(v) for v in str(spec).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {spec!r}") from None


def _names(spec) -> list[str]:
    if isinstance(spec, (list, tuple)):
        return [str(v) for v in spec]
    return [v.strip() for v in str(spec).split(",") if v.strip()]


def _curve_rows(curves) -> list[dict[str, Any]]:
    return [
        {"head": head, "epoch": p.epoch, "train_loss": p.train_loss, "val_loss": p.val_loss}
        for head, pts in (curves or {}).items()
        for p in pts
    ]


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(opts):
    out = prepare_out(opts)
    if opts["spec"]:
        cfg = SynthConfig.from_dict(json.loads(Path(opts["spec"]).read_text(encoding="utf-8")))
    else:
        cfg = defaults.default_synth_config()
    if opts["n_records"]:
        cfg = cfg.replace(n_records=int(opts["n_records"]))
    records, schema, catalog, truth = synthesize_dataset(cfg, opts["seed"])
    save_dataset(out, records, schema, catalog)
    truth.save(out / TRUTH_FILE)
    _write_json(out / "spec.json", cfg.to_dict())
    write_manifest(out, "gen-data", opts, [opts["spec"]])
    print(f"wrote {len(records)} records to {out}")


def cmd_train(opts):
    _require(opts, "data")
    if opts["policy"] not in POLICIES:
        raise UsageError(f"unknown policy {opts['policy']!r}; choose from {', '.join(POLICIES)}")
    out = prepare_out(opts)
    table, split, schema, catalog = _load_data(opts)
    train, val, test = table.subset(split.train), table.subset(split.validation), table.subset(split.test)
    router, curves = train_policy(
        opts["policy"], train, val, schema, catalog, float(opts["lam"]), opts["seed"], _overrides(opts)
    )
    version = save_checkpoint(router, out / "checkpoint.npz")
    write_table(out / "curve.csv", _curve_rows(curves), ["head", "epoch", "train_loss", "val_loss"])
    dec = choose(router, test.embeddings)
    metrics = {
        "policy": opts["policy"],
        "lambda": float(opts["lam"]),
        "seed": opts["seed"],
        "test_accuracy": routing_accuracy(dec, test),
        "test_cost": mean_routed_cost(dec, test, catalog),
        "param_count": param_count(router),
        "checkpoint_version": version,
    }
    _write_json(out / "metrics.json", metrics)
    write_manifest(out, "train", opts, [opts["data"], opts.get("config")])
    print(json.dumps(metrics, sort_keys=True))


def _runset_rows(rs: RunSet) -> list[dict[str, Any]]:
    return [
        {"policy": rs.policy, "lambda": r.lam, "seed": r.seed, "accuracy": r.accuracy, "cost": r.cost,
         "shares": json.dumps(r.shares), "error": r.error or ""}
        for r in rs.runs
    ]


def _runset_from_rows(rows: list[dict[str, str]]) -> RunSet:
    runs = []
    for r in rows:
        err = r.get("error") or None
        runs.append(
            RunResult(
                float(r["lambda"]), int(r["seed"]),
                None if err else float(r["accuracy"]),
                None if err else float(r["cost"]),
                None if err else json.loads(r["shares"]),
                err,
            )
        )
    grid = sorted({r.lam for r in runs})
    seeds = sorted({r.seed for r in runs})
    return RunSet(rows[0]["policy"] if rows else "", grid, seeds, -1, runs)


def _frontier_outputs(out: Path, rs: RunSet, catalog_names: Sequence[str] | None) -> None:
    pts = frontier_points(rs)
    write_table(out / "frontier.csv", [p.row() for p in pts])
    write_table(out / "pareto.csv", [p.row() for p in pareto_frontier(pts)])
    if catalog_names:
        rows = []
        for lam in rs.grid:
            ok = rs.at(lam)
            if ok:
                shares = np.mean([r.shares for r in ok], axis=0)
                rows.append({"lambda": lam, "seed_count": len(ok), **dict(zip(catalog_names, shares.tolist()))})
        write_table(out / "assignment_share.csv", rows, ["lambda", "seed_count", *catalog_names])


def cmd_sweep(opts):
    _require(opts, "data")
    out = prepare_out(opts)
    table, split, schema, catalog = _load_data(opts)
    grid = _floats(opts["lambda_grid"])
    seeds = [opts["seed"] + i for i in range(int(opts["seeds"]))]
    rs = run_sweep(table, split, schema, catalog, grid, seeds, opts["policy"], _overrides(opts),
                   jobs=int(opts["jobs"]), keep_routers=True)
    for r in rs.runs:
        if r.router is None:
            continue
        run_dir = out / "runs" / f"lambda_{r.lam:g}_seed_{r.seed}"
        save_checkpoint(r.router, run_dir / "checkpoint.npz")
        write_table(run_dir / "curve.csv", _curve_rows(r.curves), ["head", "epoch", "train_loss", "val_loss"])
    write_table(out / "runs.csv", _runset_rows(rs))
    _frontier_outputs(out, rs, catalog.names)
    write_manifest(out, "sweep", opts, [opts["data"], opts.get("config")])
    print(f"{len(rs.runs)} runs, {len(rs.failed)} failed; results in {out}")
    if rs.failed:
        for r in rs.failed:
            log.error("lambda=%s seed=%s: %s", r.lam, r.seed, r.error)


def cmd_eval(opts):
    _require(opts, "data", "checkpoint")
    out = prepare_out(opts)
    table, split, schema, catalog = _load_data(opts)
    test = table.subset(split.test)
    router = load_checkpoint(opts["checkpoint"])
    dec = choose(router, test.embeddings)
    oracle_acc, oracle_cost = oracle_accuracy(test, catalog)
    metrics: dict[str, Any] = {
        "policy": router.kind,
        "test_accuracy": routing_accuracy(dec, test),
        "test_cost": mean_routed_cost(dec, test, catalog),
        "oracle_accuracy": oracle_acc,
        "oracle_cost": oracle_cost,
        "param_count": param_count(router),
    }
    if isinstance(router, BottleneckRouter):
        metrics["concepts"] = concept_metrics(router.predict_concepts(test.embeddings), test.concepts, schema)
    _write_json(out / "metrics.json", metrics)
    write_manifest(out, "eval", opts, [opts["data"], opts["checkpoint"]])
    print(json.dumps({k: v for k, v in metrics.items() if k != "concepts"}, sort_keys=True))


def cmd_ablate(opts):
    _require(opts, "data", "groups")
    out = prepare_out(opts)
    table, split, schema, catalog = _load_data(opts)
    seeds = [opts["seed"] + i for i in range(int(opts["seeds"]))]
    report = ablation_study(table, split, schema, catalog, _names(opts["groups"]), _floats(opts["lambdas"]),
                            seeds, _overrides(opts))
    write_table(out / "ablation.csv", report.table())
    write_manifest(out, "ablate", opts, [opts["data"], opts.get("config")])
    for row in report.table():
        print(f"{row['condition']:>24} lambda={row['lambda']:<4} acc={row['acc_mean']:.4f}±{row['acc_std']:.4f}")


def cmd_intervene(opts):
    _require(opts, "data", "checkpoint")
    out = prepare_out(opts)
    table, split, schema, catalog = _load_data(opts)
    router = load_checkpoint(opts["checkpoint"])
    if not isinstance(router, BottleneckRouter):
        raise UsageError("intervention needs a bottleneck checkpoint")
    report = intervention_study(router, table.subset(split.test), _names(opts["groups"]))
    write_table(out / "intervention.csv", report.table())
    write_manifest(out, "intervene", opts, [opts["data"], opts["checkpoint"]])
    for row in report.table():
        print(f"{row['condition']:>24} acc={row['acc_mean']:.4f} cost={row['cost_mean']:.6f}")


def cmd_counterfactual(opts):
    _require(opts, "checkpoint")
    out = prepare_out(opts)
    router = load_checkpoint(opts["checkpoint"])
    if not isinstance(router, BottleneckRouter):
        raise UsageError("counterfactuals need a bottleneck checkpoint")
    top = _names(opts["top"]) if opts["top"] else list(defaults.LANGUAGE_SPECIALISTS.get(opts["target"], ()))
    if not top:
        raise UsageError(f"no top models known for {opts['target']!r}; pass --top")
    unknown = [m for m in top if m not in router.catalog.names]
    if unknown:
        raise UsageError(f"--top names not in the checkpoint catalog: {unknown}")
    report = counterfactual_flip_study(router, opts["source"], opts["target"], top, int(opts["n_samples"]), opts["seed"])
    rows = [{"condition": r.condition, "value": r.mean} for r in report.rows]
    write_table(out / "counterfactual.csv", rows, ["condition", "value"])
    write_manifest(out, "counterfactual", opts, [opts["checkpoint"]])
    for r in rows:
        print(f"{opts['source']}->{opts['target']} {r['condition']}: {r['value']:.4f}")


def cmd_bench(opts):
    _require(opts, "checkpoint", "data")
    out = prepare_out(opts)
    table, split, _, _ = _load_data(opts)
    router = load_checkpoint(opts["checkpoint"])
    result = throughput_benchmark(router, table.subset(split.test).embeddings, int(opts["repetitions"]))
    # Timings are machine-dependent; they are printed, not hashed into the manifest.
    print(json.dumps(result, sort_keys=True))
    write_manifest(out, "bench", opts, [opts["data"], opts["checkpoint"]])


def cmd_route(opts):
    _require(opts, "checkpoint")
    router = load_checkpoint(opts["checkpoint"])
    if opts["text"] is not None:
        from .service import MockEmbeddingClient

        emb = MockEmbeddingClient(router.input_dim, opts["seed"]).embed(opts["text"])
    elif opts["embedding"] is not None:
        raw = opts["embedding"]
        if isinstance(raw, str) and Path(raw).is_file():
            raw = Path(raw).read_text(encoding="utf-8")
        emb = np.asarray(json.loads(raw) if isinstance(raw, str) else raw, dtype=np.float64)
    else:
        raise UsageError("route needs --embedding or --text")
    if opts["intervene_group"]:
        if opts["override"] is None:
            raise UsageError("--intervene-group needs --override")
        override = json.loads(opts["override"]) if isinstance(opts["override"], str) else opts["override"]
        decision = route_with_intervention(router, emb, opts["intervene_group"], override)
    else:
        decision = route(router, emb)
    payload = {
        "model": decision.model,
        "index": decision.index,
        "scores": dict(zip(router.catalog.names, np.asarray(decision.scores).tolist())),
        "rationale": decision.rationale,
    }
    if opts["verbose"] and decision.concepts is not None:
        payload["concepts"] = decision.concepts.tolist()
    print(json.dumps(payload, sort_keys=True))


def cmd_serve(opts):
    config = ServiceConfig.load(
        opts.get("config_service"),
        checkpoint_path=opts.get("checkpoint"),
        bind_addr=opts["bind"],
        embed_endpoint=opts["embed_endpoint"],
        embed_timeout_ms=opts["embed_timeout_ms"],
        mock_embeddings=opts["mock_embeddings"] or None,
    )
    if not config.checkpoint_path:
        raise UsageError("serve needs --checkpoint or CHECKPOINT_PATH")
    serve(config)


def cmd_report(opts):
    _require(opts, "sweep")
    out = prepare_out(opts)
    rows = read_table(Path(opts["sweep"]) / "runs.csv")
    if not rows:
        raise UsageError(f"{opts['sweep']}/runs.csv has no runs")
    rs = _runset_from_rows(rows)
    _frontier_outputs(out, rs, None)
    inputs = [opts["sweep"]]
    if opts["compare"]:
        other = _runset_from_rows(read_table(Path(opts["compare"]) / "runs.csv"))
        write_table(
            out / "significance.csv",
            compare_runsets(rs, other),
            ["lambda", "policy_a", "policy_b", "acc_mean_a", "acc_std_a", "acc_mean_b", "acc_std_b",
             "t_statistic", "t_p_value", "u_statistic", "u_p_value"],
        )
        inputs.append(opts["compare"])
    write_manifest(out, "report", opts, inputs)
    print(f"report written to {out}")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="conceptroute", description="Cost-aware concept-bottleneck query routing.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose-log", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_, *, data=False, ckpt=False, out=True):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.set_defaults(func=func)
        sp.add_argument("--config", default=None, help="JSON file of option values (flags win)")
        sp.add_argument("--seed", type=int, help="seed for every random choice (default 0)")
        if out:
            sp.add_argument("--out", help="output directory")
            sp.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
        if data:
            sp.add_argument("--data", help="dataset directory (header.json + records.jsonl)")
        if ckpt:
            sp.add_argument("--checkpoint", help="router checkpoint file")
        return sp

    g = command("gen-data", cmd_gen_data, "write a synthetic dataset with planted structure")
    g.add_argument("--spec", help="generator spec (JSON); the bundled default when omitted")
    g.add_argument("--n-records", type=int)

    def heads(sp):
        sp.add_argument("--max-epochs", type=int, help="cap epochs for every head")
        sp.add_argument("--knn-k", type=int)

    t = command("train", cmd_train, "train one router", data=True)
    t.add_argument("--policy", choices=POLICIES)
    t.add_argument("--lambda", dest="lam", type=float)
    heads(t)

    s = command("sweep", cmd_sweep, "train over a lambda grid and several seeds", data=True)
    s.add_argument("--policy", choices=POLICIES)
    s.add_argument("--lambda-grid", help="'default' or comma-separated values")
    s.add_argument("--seeds", type=int, help="number of seeds (default 5)")
    s.add_argument("--jobs", type=int, help="parallel worker processes")
    heads(s)

    command("eval", cmd_eval, "score a checkpoint on the test split", data=True, ckpt=True)

    a = command("ablate", cmd_ablate, "retrain without concept groups", data=True)
    a.add_argument("--groups", help="comma-separated group names")
    a.add_argument("--lambdas", help="comma-separated lambda values (default 0,0.1,4)")
    a.add_argument("--seeds", type=int)
    heads(a)

    i = command("intervene", cmd_intervene, "replace predicted concepts with gold ones", data=True, ckpt=True)
    i.add_argument("--groups", help="comma-separated group names (default complexity)")

    c = command("counterfactual", cmd_counterfactual, "flip the language concept and measure the shift", ckpt=True)
    c.add_argument("--source")
    c.add_argument("--target")
    c.add_argument("--top", help="comma-separated model names expected to gain")
    c.add_argument("--n-samples", type=int)

    b = command("bench", cmd_bench, "time batched routing of the test split", data=True, ckpt=True)
    b.add_argument("--repetitions", type=int)

    r = command("route", cmd_route, "route one embedding and print the decision", ckpt=True, out=False)
    r.add_argument("--embedding", help="JSON array, or a file holding one")
    r.add_argument("--text", help="embed with the deterministic mock client")
    r.add_argument("--intervene-group")
    r.add_argument("--override", help="JSON array for the intervened group")
    r.add_argument("--verbose", action="store_true", help="include the full concept vector")

    sv = command("serve", cmd_serve, "run the HTTP routing service", ckpt=True, out=False)
    sv.add_argument("--service-config", dest="config_service", help="service config file (JSON)")
    sv.add_argument("--bind", help="host:port (default 127.0.0.1:8080)")
    sv.add_argument("--embed-endpoint")
    sv.add_argument("--embed-timeout-ms", type=int)
    sv.add_argument("--mock-embeddings", action="store_true")

    rp = command("report", cmd_report, "frontier and significance tables from sweep outputs")
    rp.add_argument("--sweep", help="sweep output directory")
    rp.add_argument("--compare", help="second sweep directory to test against")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(
            level=logging.DEBUG if ns.verbose_log else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )
        opts = resolve(ns.command, ns)
        ns.func(opts)
        return 0
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
