"""Command-line entry point.

Every command resolves an effective config (file values overridden by
flags), prints it on request, and works under an output directory. Run
artifacts are deterministic; wall-clock timestamps are confined to each
run's meta.json so artifact trees diff cleanly. Commands that fan out over
workers produce byte-identical outputs for any worker count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from multiprocessing import get_context
from pathlib import Path

from .bench import (
    BenchRow,
    emit_report,
    extract_dataset_features,
    load_features,
    manifest_labels,
    run_benchmark,
    task_from_manifest,
)
from .clam import PROTOCOLS, AdaptationConfig, adapt
from .curriculum import CurriculumConfig, run_curriculum
from .errors import BudgetError, ConfigError, DataError, SlidelabError
from .hipt import HierarchicalModel
from .memory import MODE_NONE, MODE_PER_REGION, MODE_PER_STAGE, CheckpointPolicy
from .multitask import MISSING
from .synthslide import DatasetManifest, generate_dataset, make_shuffled_control, preset_specs

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BUDGET = 4
EXIT_VERIFY = 5

# Non-semantic keys: they change where or how fast work happens, never what
# is computed, so they stay out of the run-directory hash.
_HASH_EXCLUDED = {"out", "workers", "trace", "print_config"}

_CHECKPOINT_MODES = {"none": MODE_NONE, "region": MODE_PER_REGION, "stage": MODE_PER_STAGE}


class UsageError(Exception):
    pass


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(d: dict) -> str:
    semantic = {k: v for k, v in d.items() if k not in _HASH_EXCLUDED}
    return hashlib.sha256(canonical_json(semantic).encode("utf-8")).hexdigest()[:16]


def _load_config_file(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p}: top level must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"config file {p}: unknown keys {sorted(unknown)}")
    return raw


def _effective(args: argparse.Namespace, file_keys: set[str], defaults: dict) -> dict:
    """defaults < config file < explicit CLI flags."""
    cfg = dict(defaults)
    cfg.update(_load_config_file(getattr(args, "config", None), file_keys))
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _write_meta(run_dir: Path, command: str, t0: float) -> None:
    meta = {
        "command": command,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "wall_time_s": time.monotonic() - t0,
    }
    (run_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _emit_config(run_dir: Path, cfg: dict) -> None:
    (run_dir / "config.json").write_text(canonical_json(cfg) + "\n", encoding="utf-8")


def _resolve_model_dir(path: str) -> Path:
    """Accept a saved model directory or a pretrain run directory."""
    p = Path(path)
    if (p / "config.json").exists() and any(p.glob("*.hptf")):
        return p
    for sub in ("stage_b/model", "stage_a/model"):
        if (p / sub / "config.json").exists():
            return p / sub
    raise ConfigError(f"no model checkpoint found under {p}")


def _print_config(cfg: dict) -> None:
    sys.stdout.write(canonical_json(cfg) + "\n")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    cfg = _effective(
        args,
        file_keys={"preset", "seed", "shuffled"},
        defaults={"preset": "mini", "seed": 0, "shuffled": True, "out": "data", "workers": 1},
    )
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for spec in preset_specs(cfg["preset"], int(cfg["seed"])):
        manifest = generate_dataset(spec, out, workers=int(cfg["workers"]))
        if cfg["shuffled"] and manifest.primary_task is not None:
            make_shuffled_control(out / spec.dataset_id, out)
    _write_meta(out, "gen-data", t0)
    sys.stdout.write(f"{out}\n")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    t0 = time.monotonic()
    file_keys = {
        "stage_a_steps", "stage_b_steps", "batch_patches", "batch_regions", "batch_slides",
        "lr", "weight_decay", "beta1", "beta2", "eps",
        "w_dino_patch", "w_dino_region", "w_slide_ce", "seed", "checkpoint", "mem_budget",
    }
    base = CurriculumConfig()
    defaults = {
        "data": None,
        "stage_a_steps": base.stage_a_steps, "stage_b_steps": base.stage_b_steps,
        "batch_patches": base.batch_patches, "batch_regions": base.batch_regions,
        "batch_slides": base.batch_slides,
        "lr": base.lr, "weight_decay": base.weight_decay,
        "beta1": base.beta1, "beta2": base.beta2, "eps": base.eps,
        "w_dino_patch": base.w_dino_patch, "w_dino_region": base.w_dino_region,
        "w_slide_ce": base.w_slide_ce,
        "seed": 0, "checkpoint": "none", "mem_budget": None,
        "out": "runs", "trace": False,
    }
    cfg = _effective(args, file_keys, defaults)
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if cfg["data"] is None:
        raise ConfigError("pretrain requires --data <dataset dir>")
    data_dir = _require_dir(cfg["data"], "dataset directory")
    if cfg["checkpoint"] not in _CHECKPOINT_MODES:
        raise ConfigError(f"unknown checkpoint mode {cfg['checkpoint']!r}")
    policy = CheckpointPolicy(
        mode=_CHECKPOINT_MODES[cfg["checkpoint"]],
        fast_budget_bytes=None if cfg["mem_budget"] is None else int(cfg["mem_budget"]),
    )
    run_config = CurriculumConfig(
        stage_a_steps=int(cfg["stage_a_steps"]), stage_b_steps=int(cfg["stage_b_steps"]),
        batch_patches=int(cfg["batch_patches"]), batch_regions=int(cfg["batch_regions"]),
        batch_slides=int(cfg["batch_slides"]),
        lr=float(cfg["lr"]), weight_decay=float(cfg["weight_decay"]),
        beta1=float(cfg["beta1"]), beta2=float(cfg["beta2"]), eps=float(cfg["eps"]),
        w_dino_patch=float(cfg["w_dino_patch"]), w_dino_region=float(cfg["w_dino_region"]),
        w_slide_ce=float(cfg["w_slide_ce"]),
        seed=int(cfg["seed"]), policy=policy,
    )
    run_dir = Path(cfg["out"]) / f"run-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _emit_config(run_dir, cfg)
    trace_path = (run_dir / "trace.jsonl") if cfg["trace"] else None
    report = run_curriculum(run_config, data_dir, run_dir, trace_path=trace_path)
    _write_meta(run_dir, "pretrain", t0)
    sys.stdout.write(f"{run_dir}\n")
    sys.stdout.write(canonical_json(report.asdict()) + "\n")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    t0 = time.monotonic()
    cfg = _effective(
        args,
        file_keys=set(),
        defaults={"data": None, "model": None, "out": "features", "workers": 1},
    )
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if cfg["data"] is None or cfg["model"] is None:
        raise ConfigError("extract-features requires --data and --model")
    data_dir = _require_dir(cfg["data"], "dataset directory")
    model = HierarchicalModel.load(_resolve_model_dir(cfg["model"]))
    manifest = DatasetManifest.load(data_dir)
    out = Path(cfg["out"]) / manifest.dataset_id
    extract_dataset_features(model, data_dir, out, workers=int(cfg["workers"]))
    _write_meta(out, "extract-features", t0)
    sys.stdout.write(f"{out}\n")
    return EXIT_OK


def cmd_adapt(args) -> int:
    t0 = time.monotonic()
    cfg = _effective(
        args,
        file_keys={"protocol", "epochs", "lr", "lambda_instance", "k_instances", "hidden", "seed"},
        defaults={
            "data": None, "features": None, "task": None,
            "protocol": "clam", "epochs": 30, "lr": 5e-3,
            "lambda_instance": 0.3, "k_instances": 4, "hidden": 16,
            "seed": 0, "out": "runs",
        },
    )
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if cfg["data"] is None or cfg["features"] is None:
        raise ConfigError("adapt requires --data and --features")
    data_dir = _require_dir(cfg["data"], "dataset directory")
    feat_dir = _require_dir(cfg["features"], "features directory")
    manifest = DatasetManifest.load(data_dir)
    task_id = cfg["task"] or manifest.primary_task
    if task_id is None:
        raise ConfigError(f"{manifest.dataset_id} has no primary task; pass --task")
    adapt_config = AdaptationConfig(
        protocol=cfg["protocol"], epochs=int(cfg["epochs"]), lr=float(cfg["lr"]),
        lambda_instance=float(cfg["lambda_instance"]), k_instances=int(cfg["k_instances"]),
        hidden=int(cfg["hidden"]), seed=int(cfg["seed"]),
    )
    labels = {}
    for rec in manifest.slides:
        v = rec.labels.get(task_id)
        labels[rec.slide_id] = MISSING if v is None else int(v)
    feats = load_features(feat_dir, [r.slide_id for r in manifest.slides])
    result = adapt(feats, labels, manifest.splits["train"], manifest.splits["test"], adapt_config)

    run_dir = Path(cfg["out"]) / f"run-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _emit_config(run_dir, cfg)
    lines = ["slide_id,task_id,score,label"]
    for sid in manifest.splits["test"]:
        lines.append(f"{sid},{task_id},{result.scores[sid]!r},{labels.get(sid, MISSING)}")
    (run_dir / "scores.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_meta(run_dir, "adapt", t0)
    sys.stdout.write(f"{run_dir}\n")
    return EXIT_OK


# Fork-shared state for eval jobs: populated in the parent right before the
# pool spawns, so children inherit features without pickling them per job.
_EVAL_CTX: dict = {}


def _eval_job(job: tuple[str, int]) -> list:
    dataset_id, seed = job
    return run_benchmark(
        _EVAL_CTX["tasks"][dataset_id],
        _EVAL_CTX["features"][dataset_id],
        _EVAL_CTX["labels"][dataset_id],
        _EVAL_CTX["adapt_config"],
        seeds=(seed,),
    )


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    cfg = _effective(
        args,
        file_keys={"protocol", "epochs", "lr", "lambda_instance", "k_instances",
                   "hidden", "seeds", "shuffled"},
        defaults={
            "data": None, "model": None, "features": None,
            "protocol": "clam", "epochs": 30, "lr": 5e-3,
            "lambda_instance": 0.3, "k_instances": 4, "hidden": 16,
            "seeds": "0,1,2,3", "shuffled": False,
            "out": "runs", "workers": 1,
        },
    )
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if cfg["data"] is None or cfg["model"] is None:
        raise ConfigError("eval requires --data <dataset root> and --model")
    data_root = _require_dir(cfg["data"], "dataset root")
    if cfg["protocol"] not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {cfg['protocol']!r}")
    seeds = tuple(int(s) for s in str(cfg["seeds"]).split(",") if s != "")
    if not seeds:
        raise ConfigError("no seeds given")
    model = HierarchicalModel.load(_resolve_model_dir(cfg["model"]))
    adapt_config = AdaptationConfig(
        protocol=cfg["protocol"], epochs=int(cfg["epochs"]), lr=float(cfg["lr"]),
        lambda_instance=float(cfg["lambda_instance"]), k_instances=int(cfg["k_instances"]),
        hidden=int(cfg["hidden"]),
    )

    bench_dirs = sorted(
        p for p in data_root.iterdir()
        if p.is_dir() and p.name.startswith("bench-") and not p.name.endswith("-shuffled")
        and (p / "manifest.json").exists()
    )
    if not bench_dirs:
        raise DataError(f"no bench-* datasets under {data_root}")

    run_dir = Path(cfg["out"]) / f"run-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _emit_config(run_dir, cfg)

    feat_root = Path(cfg["features"]) if cfg["features"] else run_dir / "features"
    workers = int(cfg["workers"])

    tasks: dict = {}
    labels: dict = {}
    features: dict = {}
    for ds_dir in bench_dirs:
        manifest = DatasetManifest.load(ds_dir)
        ds = manifest.dataset_id
        fdir = feat_root / ds
        probe = fdir / f"{manifest.slides[0].slide_id}.patch.hptf"
        if not probe.exists():
            extract_dataset_features(model, ds_dir, fdir, workers=workers)
        features[ds] = load_features(fdir, [r.slide_id for r in manifest.slides])
        tasks[ds] = task_from_manifest(manifest, protocols=(cfg["protocol"],))
        if cfg["shuffled"]:
            twin_dir = data_root / f"{ds}-shuffled"
            if not (twin_dir / "manifest.json").exists():
                raise DataError(f"--shuffled needs {twin_dir}; gen-data writes it")
            labels[ds] = manifest_labels(DatasetManifest.load(twin_dir))
        else:
            labels[ds] = manifest_labels(manifest)

    jobs = [(ds, seed) for ds in sorted(tasks) for seed in seeds]
    _EVAL_CTX.update(tasks=tasks, labels=labels, features=features, adapt_config=adapt_config)
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
                chunks = list(pool.map(_eval_job, jobs))
        else:
            chunks = [_eval_job(j) for j in jobs]
    finally:
        _EVAL_CTX.clear()
    rows = [row for chunk in chunks for row in chunk]
    summary = emit_report(rows, run_dir)
    _write_meta(run_dir, "eval", t0)
    sys.stdout.write(f"{run_dir}\n")
    sys.stdout.write(canonical_json({"overall": summary["overall"]}) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    t0 = time.monotonic()
    cfg = {"from": args.source, "out": args.out}
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    src = Path(cfg["from"])
    csv_path = src / "report.csv"
    if not csv_path.exists():
        raise DataError(f"{csv_path} not found")
    lines = csv_path.read_text(encoding="utf-8").strip().splitlines()
    if lines[0] != "task_id,protocol,seed,auroc,n_test":
        raise DataError(f"{csv_path}: unexpected header {lines[0]!r}")
    rows = []
    for line in lines[1:]:
        task_key, protocol, seed, value, n_test = line.split(",")
        dataset_id, _, task_id = task_key.partition("/")
        rows.append(BenchRow(task_id, dataset_id, protocol, int(seed), float(value), int(n_test)))
    out = Path(cfg["out"]) if cfg["out"] else src
    out.mkdir(parents=True, exist_ok=True)
    emit_report(rows, out)
    _write_meta(out, "report", t0)
    sys.stdout.write(f"{out}\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .selfcheck import run_all

    t0 = time.monotonic()
    cfg = {"tol": args.tol if args.tol is not None else 1e-5}
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    results, ok = run_all(tol=float(cfg["tol"]))
    for r in results:
        sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}\n")
    sys.stdout.write(
        f"{'PASS' if ok else 'FAIL'} {len(results)} checks in {time.monotonic() - t0:.1f}s\n"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]
        (out / "verify.json").write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        _write_meta(out, "verify", t0)
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slidelab", description="synthetic-slide hierarchical pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, workers=False, trace=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--print-config", action="store_true", dest="print_config")
        if workers:
            p.add_argument("--workers", type=int)
        if trace:
            p.add_argument("--trace", action="store_true", default=None)

    p = sub.add_parser("gen-data", help="render a synthetic dataset preset")
    common(p, workers=True)
    p.add_argument("--preset", choices=("mini", "tiny"))
    p.add_argument("--shuffled", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the two-stage curriculum")
    common(p, trace=True)
    p.add_argument("--data")
    p.add_argument("--mem-budget", type=int, dest="mem_budget")
    p.add_argument("--checkpoint", choices=tuple(_CHECKPOINT_MODES))
    p.add_argument("--stage-a-steps", type=int, dest="stage_a_steps")
    p.add_argument("--stage-b-steps", type=int, dest="stage_b_steps")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("extract-features", help="write frozen per-slide features")
    common(p, workers=True)
    p.add_argument("--data")
    p.add_argument("--model")
    p.set_defaults(fn=cmd_extract_features)

    p = sub.add_parser("adapt", help="train one downstream head on frozen features")
    common(p)
    p.add_argument("--data")
    p.add_argument("--features")
    p.add_argument("--task")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="benchmark every bench-* dataset over seeds")
    common(p, workers=True)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--features")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--seeds")
    p.add_argument("--shuffled", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="recompute summary and radar data from report.csv")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true", dest="print_config")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("verify", help="run gradient and invariant self-checks")
    p.add_argument("--tol", type=float)
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true", dest="print_config")
    p.set_defaults(fn=cmd_verify)

    return parser


def entry(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except BudgetError as exc:
        sys.stderr.write(f"budget error: {exc}\n")
        return EXIT_BUDGET
    except SlidelabError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA


def main() -> None:
    raise SystemExit(entry())


if __name__ == "__main__":
    main()
