"""Frozen-backbone evaluation: per-task adaptation over four seeds, AUROC
with midrank tie handling, and report emission (CSV + JSON summary + radar
series)."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .clam import (
    PROTOCOL_CLAM,
    PROTOCOL_LINEAR,
    PROTOCOLS,
    AdaptationConfig,
    SlideFeatures,
    adapt,
    extract_slide_features,
)
from .engine import read_snapshot, write_snapshot
from .errors import ConfigError, DataError, MetricError
from .hipt import HierarchicalModel
from .multitask import MISSING
from .synthslide import DatasetManifest, load_slide_image, patchify

DEFAULT_SEEDS = (0, 1, 2, 3)


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count
    half (midrank estimator, exactly the pairwise definition)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be matching 1-D")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise MetricError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined with a single class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    ranks[order] = np.arange(1, y.size + 1, dtype=np.float64)
    # midranks: average rank within each tied block
    sorted_s = s[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def protocol_for_backbone(kind: str) -> str:
    """Evaluation protocol by backbone flavor: slide-level embeddings get a
    linear probe; patch-level (and this model's early exit) get CLAM."""
    table = {"slide-level": PROTOCOL_LINEAR, "patch-level": PROTOCOL_CLAM, "early-exit": PROTOCOL_CLAM}
    if kind not in table:
        raise ConfigError(f"unknown backbone kind {kind!r}")
    return table[kind]


# -- feature extraction ------------------------------------------------------

_EXTRACT_CTX: dict = {}


def _extract_one(args) -> str:
    slide_id = args
    model: HierarchicalModel = _EXTRACT_CTX["model"]
    manifest: DatasetManifest = _EXTRACT_CTX["manifest"]
    dataset_dir: Path = _EXTRACT_CTX["dataset_dir"]
    out_dir: Path = _EXTRACT_CTX["out_dir"]
    rec = manifest.by_id()[slide_id]
    patches = patchify(load_slide_image(rec, dataset_dir), rec.geometry)
    feats = extract_slide_features(model, patches, rec.geometry.grid, slide_id=slide_id)
    write_snapshot(out_dir / f"{slide_id}.patch.hptf", feats.patch_feats)
    write_snapshot(out_dir / f"{slide_id}.slide.hptf", feats.slide_embed)
    return slide_id


def extract_dataset_features(model: HierarchicalModel, dataset_dir: Path, out_dir: Path,
                             workers: int = 1) -> list[str]:
    """Write per-slide feature snapshots; byte-identical for any worker count."""
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(dataset_dir)
    ids = [rec.slide_id for rec in manifest.slides]
    _EXTRACT_CTX.update(model=model, manifest=manifest, dataset_dir=dataset_dir, out_dir=out_dir)
    try:
        if workers > 1 and len(ids) > 1:
            # fork inherits _EXTRACT_CTX; each slide's files are independent
            with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
                done = list(pool.map(_extract_one, ids, chunksize=4))
        else:
            done = [_extract_one(i) for i in ids]
    finally:
        _EXTRACT_CTX.clear()
    return done


def load_features(features_dir: Path, slide_ids: list[str]) -> dict[str, SlideFeatures]:
    features_dir = Path(features_dir)
    out = {}
    for sid in slide_ids:
        ppath = features_dir / f"{sid}.patch.hptf"
        spath = features_dir / f"{sid}.slide.hptf"
        if not ppath.exists() or not spath.exists():
            raise DataError(f"missing feature snapshots for {sid} in {features_dir}")
        out[sid] = SlideFeatures(sid, read_snapshot(ppath), read_snapshot(spath))
    return out


# -- benchmark runs ----------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkTask:
    task_id: str
    dataset_id: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    positive_class: int = 1
    protocols: tuple[str, ...] = (PROTOCOL_CLAM,)

    def __post_init__(self):
        if not self.test_ids:
            raise ConfigError(f"{self.dataset_id}: empty test split")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}")


def task_from_manifest(manifest: DatasetManifest, protocols=(PROTOCOL_CLAM,)) -> BenchmarkTask:
    if manifest.primary_task is None:
        raise ConfigError(f"{manifest.dataset_id} has no primary task")
    labels = [manifest.by_id()[s].labels.get(manifest.primary_task) for s in manifest.splits["test"]]
    present = {v for v in labels if v is not None and v != MISSING}
    if present != {0, 1}:
        raise ConfigError(f"{manifest.dataset_id}: test split must carry both classes, saw {sorted(present)}")
    return BenchmarkTask(
        task_id=manifest.primary_task,
        dataset_id=manifest.dataset_id,
        train_ids=tuple(manifest.splits["train"]),
        test_ids=tuple(manifest.splits["test"]),
        protocols=tuple(protocols),
    )


@dataclass(frozen=True)
class BenchRow:
    task_id: str
    dataset_id: str
    protocol: str
    seed: int
    auroc: float
    n_test: int


def run_benchmark(
    task: BenchmarkTask,
    features: dict[str, SlideFeatures],
    labels: dict[str, int],
    adapt_config: AdaptationConfig,
    seeds=DEFAULT_SEEDS,
) -> list[BenchRow]:
    """Adapt and score once per (protocol, seed). Each seed builds its own
    head from scratch, so rows never depend on which other seeds ran."""
    rows = []
    test_labels = np.asarray([labels[s] for s in task.test_ids])
    for protocol in task.protocols:
        for seed in seeds:
            cfg = replace(adapt_config, protocol=protocol, seed=int(seed))
            result = adapt(features, labels, list(task.train_ids), list(task.test_ids), cfg)
            scores = np.asarray([result.scores[s] for s in task.test_ids])
            rows.append(
                BenchRow(task.task_id, task.dataset_id, protocol, int(seed),
                         auroc(scores, test_labels), len(task.test_ids))
            )
    return rows


def manifest_labels(manifest: DatasetManifest) -> dict[str, int]:
    """Primary-task label per slide (MISSING stays MISSING)."""
    task = manifest.primary_task
    out = {}
    for rec in manifest.slides:
        v = rec.labels.get(task)
        out[rec.slide_id] = MISSING if v is None else int(v)
    return out


# -- report emission ---------------------------------------------------------


def emit_report(rows: list[BenchRow], out_dir: Path) -> dict:
    if not rows:
        raise ConfigError("no benchmark rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.dataset_id, r.task_id, r.protocol, r.seed))

    lines = ["task_id,protocol,seed,auroc,n_test"]
    for r in ordered:
        lines.append(f"{r.dataset_id}/{r.task_id},{r.protocol},{r.seed},{r.auroc!r},{r.n_test}")
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    by_key: dict[tuple[str, str], list[float]] = {}
    for r in ordered:
        by_key.setdefault((f"{r.dataset_id}/{r.task_id}", r.protocol), []).append(r.auroc)
    tasks: dict[str, dict] = {}
    for (task_key, protocol), vals in sorted(by_key.items()):
        arr = np.asarray(vals, dtype=np.float64)
        tasks.setdefault(task_key, {})[protocol] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=0)),
            "n_runs": int(arr.size),
        }
    protocols = sorted({r.protocol for r in ordered})
    overall = {}
    for protocol in protocols:
        means = [tasks[t][protocol]["mean"] for t in tasks if protocol in tasks[t]]
        overall[protocol] = float(np.mean(means))
    summary = {"tasks": tasks, "overall": overall}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    radar_protocol = PROTOCOL_CLAM if PROTOCOL_CLAM in protocols else protocols[0]
    radar = [[t, tasks[t][radar_protocol]["mean"]] for t in sorted(tasks) if radar_protocol in tasks[t]]
    (out_dir / "radar.json").write_text(json.dumps(radar, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return summary
