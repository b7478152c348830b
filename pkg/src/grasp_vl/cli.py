"""Single command-line entry point for every workflow.

Every run with ``--out`` writes all artifacts under that directory plus a
``manifest.json`` recording the config hash, seed, tool version and artifact
list.  Inputs are never mutated.  Failures print one machine-readable JSON
line to stderr; exit codes: 0 success, 1 gate failure, 2 usage, 3 config,
4 data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import (
    SyntheticSpec,
    build_pool,
    generate_synthetic,
    load_cache,
    validate_jsonl,
    write_cache,
)
from .errors import GraspError
from .harness import (
    GridConfig,
    estimate_cost,
    run_kappa_sensitivity,
    run_method_comparison,
    run_pool_sensitivity,
    write_emergence_csv,
    write_kappa_csv,
    write_method_csv,
    write_pool_csv,
    write_staircase_decomposition_csv,
)
from .metrics import diagnostic_report
from .objective import (
    Batch,
    LossConfig,
    TERM_NAMES,
    finite_difference_check,
)
from .trainer import TrainConfig, train
from .transforms import (
    InterfaceContract,
    NEGATIVE_TYPES,
    TransformSpec,
    VIEW_LEVELS,
    load_checkpoint,
    load_matrix_transform,
    make_model,
    save_matrix_transform,
)

log = logging.getLogger("grasp")

_CONFIG_CODES = {"CONFIG", "UNKNOWN_VARIANT", "INVALID_CONTRACT", "UNKNOWN_METHOD", "NOT_POWER_OF_TWO"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "USAGE", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _write_manifest(out: Path, verb: str, payload: dict, seed: int | None, artifacts: list[str]) -> None:
    manifest = {
        "tool": "grasp",
        "version": __version__,
        "verb": verb,
        "config_hash": _config_hash(payload),
        "seed": seed,
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _load_transform(args):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint).eval_transform()
    if getattr(args, "matrix", None):
        return load_matrix_transform(args.matrix)
    raise GraspError("CONFIG", "pass either --checkpoint or --matrix")


def _args_payload(args) -> dict:
    # out path and thread count affect where/how work runs, not what it computes
    skip = {"func", "out", "threads"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# Verbs


def _cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    if args.seed is not None and args.seed != spec.seed:
        log.info("flag --seed %d overrides spec seed %d", args.seed, spec.seed)
        spec = SyntheticSpec.from_json_dict({**spec.to_json_dict(), "seed": args.seed})
    out = _out_dir(args)
    result = generate_synthetic(spec)
    write_cache(result.cache, out / "cache")
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for row in result.rows:
            fh.write(json.dumps(row.to_json_dict(), sort_keys=True) + "\n")
    save_matrix_transform(out / "oracle.transform", result.oracle)
    _write_json(out / "spec.json", spec.to_json_dict())
    artifacts = [
        "cache/manifest.json",
        *(f"cache/{name}.f32" for name, _ in result.cache.matrices()),
        "cache/ids.txt",
        "cache/splits.json",
        "annotations.jsonl",
        "oracle.transform",
        "spec.json",
    ]
    _write_manifest(out, "synth", _args_payload(args), spec.seed, artifacts)
    return 0


def _cmd_validate(args) -> int:
    out = _out_dir(args)
    results, summary = validate_jsonl(args.input)
    with open(out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(res.to_json_dict(), sort_keys=True) + "\n")
    _write_json(out / "summary.json", summary)
    _write_manifest(out, "validate", _args_payload(args), None, ["verdicts.jsonl", "summary.json"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _default_train_config(cache, args) -> TrainConfig:
    contract = InterfaceContract.default_ladder(cache.dim)
    return TrainConfig(
        spec=TransformSpec(args.variant, cache.dim, stacks=args.stacks, rank=args.rank),
        contract=contract,
        loss=LossConfig.default(contract),
        seed=args.seed if args.seed is not None else 0,
    )


def _cmd_train(args) -> int:
    cache = load_cache(args.cache)
    if args.config:
        config = TrainConfig.from_json_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    else:
        config = _default_train_config(cache, args)
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr_transform": args.lr,
        "lr_temps": args.lr,
        "curriculum": args.curriculum,
        "warmup_epochs": args.warmup_epochs,
        "seed": args.seed,
    }
    for name, value in overrides.items():
        if value is not None and getattr(config, name) != value:
            if args.config:
                log.info("flag overrides config: %s=%s", name, value)
            setattr(config, name, value)
    out = _out_dir(args)
    checkpoint, history = train(config, cache)
    checkpoint.save(out / "checkpoint.ckpt")
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for stats in history:
            fh.write(json.dumps(stats.to_json_dict(), sort_keys=True) + "\n")
    _write_json(out / "train_config.json", config.to_json_dict())
    _write_manifest(
        out,
        "train",
        _args_payload(args),
        config.seed,
        ["checkpoint.ckpt", "history.jsonl", "train_config.json"],
    )
    print(
        json.dumps(
            {"best_epoch": checkpoint.epoch, "val_stair": checkpoint.val_stair, "val_drift": checkpoint.val_drift}
        )
    )
    return 0


def _contract_for(args, cache) -> InterfaceContract:
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint).contract
    return InterfaceContract.default_ladder(cache.dim)


def _entity_labels(path) -> dict[str, str]:
    from .datastore import parse_annotation_line

    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = parse_annotation_line(line)
                labels[row.id] = row.entity
    return labels


def _cmd_eval(args) -> int:
    cache = load_cache(args.cache)
    transform = _load_transform(args)
    contract = _contract_for(args, cache)
    labels = _entity_labels(args.annotations) if args.annotations else None
    report = diagnostic_report(
        cache, transform, contract, pool_mode=args.pool, query_split=args.split, labels=labels
    )
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_json_dict())
    _write_manifest(out, "eval", _args_payload(args), args.seed, ["report.json"])
    print(json.dumps({"stair": report.stair, "hard_avg": report.hard_avg, "drift": report.drift}))
    return 0


def _cmd_report(args) -> int:
    cache = load_cache(args.cache)
    transform = _load_transform(args)
    contract = _contract_for(args, cache)
    labels = _entity_labels(args.annotations) if args.annotations else None
    report = diagnostic_report(
        cache, transform, contract, pool_mode=args.pool, query_split=args.split, labels=labels
    )
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_json_dict())
    named = [(args.label, report)]
    write_staircase_decomposition_csv(named, contract, out / "staircase_decomposition.csv")
    write_emergence_csv(named, out / "emergence_decomposition.csv")
    _write_manifest(
        out,
        "report",
        _args_payload(args),
        args.seed,
        ["report.json", "staircase_decomposition.csv", "emergence_decomposition.csv"],
    )
    return 0


def _grid_from_args(args, cache) -> GridConfig:
    contract = InterfaceContract.default_ladder(cache.dim)
    grid = GridConfig(contract=contract, seed=args.seed if args.seed is not None else 0)
    for name in ("epochs", "batch_size", "lr", "warmup_epochs", "curriculum", "pool_mode", "stacks", "rank"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(grid, name, value)
    if getattr(args, "methods", None):
        grid.methods = tuple(args.methods.split(","))
    return grid


def _cmd_compare(args) -> int:
    cache = load_cache(args.cache)
    grid = _grid_from_args(args, cache)
    comparison = run_method_comparison(cache, grid)
    out = _out_dir(args)
    artifacts = ["methods.csv", "methods.json"]
    write_method_csv(comparison.rows, out / "methods.csv")
    _write_json(out / "methods.json", [r.to_json_dict() for r in comparison.rows])
    named = [(name, rep) for name, rep in comparison.reports.items()]
    write_staircase_decomposition_csv(named, grid.contract, out / "staircase_decomposition.csv")
    write_emergence_csv(named, out / "emergence_decomposition.csv")
    artifacts += ["staircase_decomposition.csv", "emergence_decomposition.csv"]
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for name, checkpoint in comparison.checkpoints.items():
        checkpoint.save(ckpt_dir / f"{name}.ckpt")
        artifacts.append(f"checkpoints/{name}.ckpt")
    _write_manifest(out, "compare", _args_payload(args), grid.seed, artifacts)
    return 0


def _cmd_kappa(args) -> int:
    cache = load_cache(args.cache)
    grid = _grid_from_args(args, cache)
    rows = run_kappa_sensitivity(cache, grid)
    out = _out_dir(args)
    write_kappa_csv(rows, out / "kappa.csv")
    _write_json(out / "kappa.json", [r.to_json_dict() for r in rows])
    _write_manifest(out, "kappa", _args_payload(args), grid.seed, ["kappa.csv", "kappa.json"])
    return 0


def _cmd_pool(args) -> int:
    cache = load_cache(args.cache)
    transform = _load_transform(args)
    contract = _contract_for(args, cache)
    rows = run_pool_sensitivity(cache, transform, contract)
    out = _out_dir(args)
    write_pool_csv(rows, out / "pool.csv")
    _write_json(out / "pool.json", [r.to_json_dict() for r in rows])
    _write_manifest(out, "pool", _args_payload(args), args.seed, ["pool.csv", "pool.json"])
    return 0


def _cmd_cost(args) -> int:
    est = estimate_cost(args.dim, args.gallery, precision_bytes=args.precision_bytes)
    for name, value in est.formatted().items():
        print(f"{name}\t{value}")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "cost.json", est.to_json_dict())
        _write_manifest(out, "cost", _args_payload(args), None, ["cost.json"])
    return 0


def _gradcheck_contract(dim: int) -> InterfaceContract:
    ks = sorted({max(1, dim // 16), max(1, dim // 8), max(1, dim // 4), max(1, dim // 2), dim})
    view_of = {}
    for i, k in enumerate(ks):
        view_of[k] = VIEW_LEVELS[min(i, len(ks) - 1, 3)]
    view_of[ks[-1]] = "G3"
    kappa = {
        "object": ks[0],
        "attribute": ks[min(1, len(ks) - 1)],
        "relation": ks[min(2, len(ks) - 1)],
        "action": ks[min(2, len(ks) - 1)],
        "order": ks[min(2, len(ks) - 1)],
        "full": ks[min(3, len(ks) - 1)],
    }
    return InterfaceContract(prefixes=tuple(ks), view_of=view_of, kappa=kappa)


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    contract = _gradcheck_contract(args.dim)

    def unit(n, d):
        x = rng.standard_normal((n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    batch = Batch(
        images=unit(args.batch, args.dim),
        views={g: unit(args.batch, args.dim) for g in VIEW_LEVELS},
        negatives={r: unit(args.batch, args.dim) for r in NEGATIVE_TYPES},
    )
    config = LossConfig.default(contract)
    model = make_model(TransformSpec(args.variant, args.dim, stacks=args.stacks, rank=args.rank))
    params = model.init_params(np.random.default_rng(seed + 1))
    log_temps = np.full(len(contract.prefixes), math.log(0.07))
    worst = 0.0
    results = {}
    for terms in (*[(t,) for t in TERM_NAMES], None):
        err = finite_difference_check(
            model, params, log_temps, batch, config, contract, step=args.step, terms=terms
        )
        label = terms[0] if terms else "full"
        results[label] = err
        worst = max(worst, err)
        print(f"{label}\tmax_rel_error={err:.3e}")
    passed = worst <= args.tolerance
    print(f"gradcheck\t{'PASS' if passed else 'FAIL'}\tworst={worst:.3e}\ttolerance={args.tolerance:g}")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "gradcheck.json", {"results": results, "worst": worst, "passed": passed})
        _write_manifest(out, "gradcheck", _args_payload(args), seed, ["gradcheck.json"])
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="grasp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if out_required:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cache with a planted staircase")
    p.add_argument("--spec", required=True)
    common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="validate an annotation JSONL file")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("train", help="train a transform on a cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", default="dense_cayley")
    p.add_argument("--stacks", type=int, default=8)
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--curriculum", choices=("default", "all_after_warmup", "slow", "none"), default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_train)

    for verb, fn in (("eval", _cmd_eval), ("report", _cmd_report)):
        p = sub.add_parser(verb, help=f"{verb} a checkpoint or fixed transform on a cache")
        p.add_argument("--cache", required=True)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--matrix", default=None)
        p.add_argument("--pool", choices=("full", "test_only"), default="full")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--annotations", default=None, help="JSONL rows; enables entity-label rank statistics")
        if verb == "report":
            p.add_argument("--label", default="checkpoint")
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("compare", help="run the method-comparison grid")
    p.add_argument("--cache", required=True)
    p.add_argument("--methods", default=None, help="comma-separated subset of methods")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--curriculum", choices=("default", "all_after_warmup", "slow", "none"), default=None)
    p.add_argument("--pool-mode", dest="pool_mode", choices=("full", "test_only"), default=None)
    p.add_argument("--stacks", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("kappa", help="boundary-map sensitivity grid")
    p.add_argument("--cache", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    common(p)
    p.set_defaults(func=_cmd_kappa)

    p = sub.add_parser("pool", help="candidate-pool sensitivity for one checkpoint")
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--matrix", default=None)
    common(p)
    p.set_defaults(func=_cmd_pool)

    p = sub.add_parser("cost", help="scaling-cost estimates for a gallery")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--gallery", type=int, required=True)
    p.add_argument("--precision-bytes", dest="precision_bytes", type=int, default=2)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the objective gradients")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--variant", default="dense_cayley")
    p.add_argument("--stacks", type=int, default=2)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn

        class _Null:
            def __enter__(self):
                return self

            def __exit__(self, *exc):
                return False

        return _Null()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("GRASP_THREADS", "1"))
    try:
        with _thread_limit(threads):
            return args.func(args)
    except GraspError as exc:
        category = "CONFIG" if exc.code in _CONFIG_CODES else "DATA"
        print(json.dumps({"error": category, "code": exc.code, "message": exc.message}), file=sys.stderr)
        return 3 if category == "CONFIG" else 4


if __name__ == "__main__":
    sys.exit(main())
