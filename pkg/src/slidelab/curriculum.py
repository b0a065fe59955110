"""Two-stage training driver.

Stage A: self-distillation only, patches (16px) plus small regions (64px),
touching stages 1 and 2. Stage B: keeps the patch loss, grows the region
loss to 256px, and adds slide-level multi-task cross-entropy through the
full hierarchy under the configured checkpoint policy. One optimizer with
decoupled weight decay drives both stages; each stage updates only the
parameters its losses reach.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dino import (
    TeacherState,
    dino_loss,
    head_forward,
    init_head_arrays,
    make_views,
    view_to_patches,
)
from .engine import Graph, Rng, Tensor, ops, write_snapshot
from .errors import ConfigError
from .hipt import (
    EMBED_DIM,
    HierarchicalModel,
    patches_to_tokens,
    pos_index_stage1,
    pos_index_stage2,
    vit_forward,
)
from .memory import CheckpointPolicy, MemoryTrace, checkpointed_forward, recompute_backward
from .multitask import LabelBatch, default_task_registry, head_forward as task_head_forward, make_task_heads, multitask_loss
from .synthslide import DatasetManifest, Geometry, load_slide_image, patchify, region_pixels

STAGE_A = "A"
STAGE_B = "B"

_STAGE_A_PREFIXES = ("stage1.", "stage2.", "dino_patch.", "dino_region.")
_STAGE_B_PREFIXES = _STAGE_A_PREFIXES + ("stage3.", "head.")

METRIC_COLUMNS = ("step", "stage", "loss_total", "loss_dino_patch", "loss_dino_region", "loss_slide_ce", "fast_peak_bytes")


@dataclass(frozen=True)
class CurriculumConfig:
    stage_a_steps: int = 200
    stage_b_steps: int = 200
    batch_patches: int = 32
    batch_regions: int = 4
    batch_slides: int = 2
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_dino_patch: float = 1.0
    w_dino_region: float = 1.0
    w_slide_ce: float = 1.0
    seed: int = 0
    policy: CheckpointPolicy = field(default_factory=CheckpointPolicy)

    def __post_init__(self):
        if self.stage_a_steps < 0 or self.stage_b_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if min(self.w_dino_patch, self.w_dino_region, self.w_slide_ce) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if min(self.batch_patches, self.batch_regions, self.batch_slides) < 1:
            raise ConfigError("batch sizes must be positive")


class AdamW:
    """Adaptive update with bias correction and decoupled weight decay."""

    def __init__(self, arrays: dict[str, np.ndarray], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in arrays.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name].astype(np.float64)
            p = self.arrays[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.astype(np.float64)
            p[...] = (p.astype(np.float64) - self.lr * update).astype(p.dtype)


@dataclass
class TrainState:
    model: HierarchicalModel
    dino_heads: dict[str, dict[str, np.ndarray]]  # "dino_patch" / "dino_region"
    task_heads: dict[str, dict[str, np.ndarray]]  # task_id -> {"w","b"}
    teachers: dict[str, TeacherState]  # "patch" / "region"
    optimizer: AdamW
    step: int = 0
    stage: str = STAGE_A

    def flat_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.model.arrays)
        for scale, head in self.dino_heads.items():
            for k, v in head.items():
                out[f"{scale}.{k}"] = v
        for task_id, head in self.task_heads.items():
            out[f"head.{task_id}.w"] = head["w"]
            out[f"head.{task_id}.b"] = head["b"]
        return out


def init_train_state(config: CurriculumConfig) -> TrainState:
    rng = Rng(config.seed)
    model = HierarchicalModel(seed=rng.derive("model").seed)
    dino_heads = {
        "dino_patch": init_head_arrays(rng.derive("dino", "patch"), embed_dim=EMBED_DIM),
        "dino_region": init_head_arrays(rng.derive("dino", "region"), embed_dim=EMBED_DIM),
    }
    registry = default_task_registry()
    heads = make_task_heads(registry, EMBED_DIM, rng.derive("heads"))
    task_heads = {t.task_id: {"w": heads[t.task_id].w, "b": heads[t.task_id].b} for t in registry}
    teachers = {
        "patch": TeacherState.from_student(
            {k: v for k, v in model.arrays.items() if k.startswith("stage1.")}, dino_heads["dino_patch"]
        ),
        "region": TeacherState.from_student(
            {k: v for k, v in model.arrays.items() if k.startswith(("stage1.", "stage2."))}, dino_heads["dino_region"]
        ),
    }
    state = TrainState(model=model, dino_heads=dino_heads, task_heads=task_heads, teachers=teachers, optimizer=None)
    state.optimizer = AdamW(state.flat_arrays(), config.lr, config.weight_decay, config.beta1, config.beta2, config.eps)
    return state


# -- batches -----------------------------------------------------------------


@dataclass
class StepBatch:
    """One step's inputs. View arrays stack both views: rows [0, n) are the
    first view, rows [n, 2n) the second, per sample index order."""

    patch_views: np.ndarray  # (2B, 16, 16, 3) f32
    region_views: np.ndarray  # (2R, S, S, 3) f32
    slide_ids: list[str]
    slide_patches: list[np.ndarray]
    slide_grids: list[int]
    labels: LabelBatch | None


class SlideCache:
    """Keeps decoded pixels and patch stacks for a dataset in memory."""

    def __init__(self, manifest: DatasetManifest, dataset_dir: Path):
        self.manifest = manifest
        self.by_id = manifest.by_id()
        self.images: dict[str, np.ndarray] = {}
        self.patches: dict[str, np.ndarray] = {}
        for rec in manifest.slides:
            img = load_slide_image(rec, dataset_dir)
            self.images[rec.slide_id] = img
            self.patches[rec.slide_id] = patchify(img, rec.geometry)

    def geometry(self, slide_id: str) -> Geometry:
        return self.by_id[slide_id].geometry


def sample_batch(rng: Rng, cache: SlideCache, config: CurriculumConfig, stage: str) -> StepBatch:
    train_ids = cache.manifest.splits["train"]
    if not train_ids:
        raise ConfigError("dataset has no training slides")
    region_px = 64 if stage == STAGE_A else 256

    views_a, views_b = [], []
    for i in range(config.batch_patches):
        sid = train_ids[rng.randint(len(train_ids))]
        stack = cache.patches[sid]
        patch = stack[rng.randint(stack.shape[0])]
        va, vb = make_views(patch, rng.derive("patch_view", i), crop=False)
        views_a.append(va)
        views_b.append(vb)
    patch_views = np.stack(views_a + views_b)

    views_a, views_b = [], []
    for i in range(config.batch_regions):
        sid = train_ids[rng.randint(len(train_ids))]
        geo = cache.geometry(sid)
        n_slots = (geo.slide_px // region_px) ** 2
        pix = region_pixels(cache.images[sid], geo, rng.randint(n_slots), region_px)
        va, vb = make_views(pix, rng.derive("region_view", i), crop=True)
        views_a.append(va)
        views_b.append(vb)
    region_views = np.stack(views_a + views_b)

    slide_ids: list[str] = []
    slide_patches: list[np.ndarray] = []
    slide_grids: list[int] = []
    labels = None
    if stage == STAGE_B:
        for _ in range(config.batch_slides):
            sid = train_ids[rng.randint(len(train_ids))]
            slide_ids.append(sid)
            slide_patches.append(cache.patches[sid])
            slide_grids.append(cache.geometry(sid).grid)
        registry = cache.manifest.registry
        labels = LabelBatch(
            slide_ids=list(slide_ids),
            labels={
                t.task_id: np.asarray([cache.by_id[s].label_or_missing(t.task_id) for s in slide_ids], dtype=np.int64)
                for t in registry
            },
            weights={t.task_id: t.loss_weight for t in registry},
        )
    return StepBatch(patch_views, region_views, slide_ids, slide_patches, slide_grids, labels)


# -- teacher forwards (plain numpy out) --------------------------------------


def _strip(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def teacher_patch_logits(state: TeacherState, model: HierarchicalModel, patch_views: np.ndarray) -> np.ndarray:
    tokens = patches_to_tokens(patch_views)
    with Graph(dtype=np.float32) as tg:
        with tg.no_grad():
            p = {k: tg.constant(v) for k, v in _strip(state.model_arrays, "stage1.").items()}
            cls, _ = vit_forward(tg, model.configs["stage1"], p, tg.constant(tokens), pos_index_stage1())
            h = {k: tg.constant(v) for k, v in state.head_arrays.items()}
            out = np.array(head_forward(tg, h, cls).data, copy=True)
    return out


def teacher_region_logits(state: TeacherState, model: HierarchicalModel, region_views: np.ndarray, size: str) -> np.ndarray:
    n_views = region_views.shape[0]
    stacks = [view_to_patches(region_views[i]) for i in range(n_views)]
    per = stacks[0].shape[0]
    tokens = patches_to_tokens(np.concatenate(stacks, axis=0))
    with Graph(dtype=np.float32) as tg:
        with tg.no_grad():
            p1 = {k: tg.constant(v) for k, v in _strip(state.model_arrays, "stage1.").items()}
            cls1, _ = vit_forward(tg, model.configs["stage1"], p1, tg.constant(tokens), pos_index_stage1())
            p2 = {k: tg.constant(v) for k, v in _strip(state.model_arrays, "stage2.").items()}
            grouped = ops.reshape(cls1, (n_views, per, EMBED_DIM))
            cls2, _ = vit_forward(tg, model.configs["stage2"], p2, grouped, pos_index_stage2(size))
            h = {k: tg.constant(v) for k, v in state.head_arrays.items()}
            out = np.array(head_forward(tg, h, cls2).data, copy=True)
    return out


# -- student losses ----------------------------------------------------------


def _bind_head(g: Graph, prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: g.tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in arrays.items()}


def _symmetric_dino(g: Graph, student_logits: Tensor, teacher_logits: np.ndarray, state: TeacherState, n: int) -> Tensor:
    s_a = ops.slice(student_logits, (slice(0, n),))
    s_b = ops.slice(student_logits, (slice(n, 2 * n),))
    l_ab = dino_loss(g, s_a, teacher_logits[n:], state.center, state.tau_s, state.tau_t)
    l_ba = dino_loss(g, s_b, teacher_logits[:n], state.center, state.tau_s, state.tau_t)
    return ops.mul_const(ops.add(l_ab, l_ba), 0.5)


@dataclass
class StepResult:
    loss_total: float
    parts: dict[str, float]
    teacher_logits: dict[str, np.ndarray]
    fast_peak_bytes: int


def _student_patch_logits(g, model, bound, head_bound, patch_views):
    tokens = g.constant(patches_to_tokens(patch_views), name="patch_tokens")
    cls, _ = model.stage1_forward(g, bound, tokens)
    return head_forward(g, head_bound, cls)


def _student_region_logits(g, model, bound, head_bound, region_views, size):
    n_views = region_views.shape[0]
    stacks = [view_to_patches(region_views[i]) for i in range(n_views)]
    per = stacks[0].shape[0]
    tokens = g.constant(patches_to_tokens(np.concatenate(stacks, axis=0)), name="region_tokens")
    cls1, _ = model.stage1_forward(g, bound, tokens)
    cls2, _ = model.stage2_forward(g, bound, ops.reshape(cls1, (n_views, per, EMBED_DIM)), size)
    return head_forward(g, head_bound, cls2)


def build_step_losses(
    g: Graph,
    state: TrainState,
    batch: StepBatch,
    config: CurriculumConfig,
    stage: str,
    bound: dict[str, Tensor],
) -> tuple[Tensor, dict[str, float], dict[str, np.ndarray]]:
    """Assemble the stage's weighted loss on graph g. Returns (total, parts,
    teacher logits for the center updates). Zero-weight terms are skipped
    outright so a disabled term cannot contribute loss or gradient."""
    model = state.model
    size = "small" if stage == STAGE_A else "large"
    terms: list[Tensor] = []
    parts: dict[str, float] = {"dino_patch": 0.0, "dino_region": 0.0, "slide_ce": 0.0}
    teacher_logits: dict[str, np.ndarray] = {}

    if config.w_dino_patch > 0:
        t_logits = teacher_patch_logits(state.teachers["patch"], model, batch.patch_views)
        teacher_logits["patch"] = t_logits
        if not state.teachers["patch"].center.any():
            state.teachers["patch"].warm_start_center(t_logits)
        head_bound = _bind_head(g, "dino_patch", state.dino_heads["dino_patch"])
        s_logits = _student_patch_logits(g, model, bound, head_bound, batch.patch_views)
        term = _symmetric_dino(g, s_logits, t_logits, state.teachers["patch"], config.batch_patches)
        parts["dino_patch"] = term.item()
        terms.append(ops.mul_const(term, config.w_dino_patch))

    if config.w_dino_region > 0:
        t_logits = teacher_region_logits(state.teachers["region"], model, batch.region_views, size)
        teacher_logits["region"] = t_logits
        head_bound = _bind_head(g, "dino_region", state.dino_heads["dino_region"])
        s_logits = _student_region_logits(g, model, bound, head_bound, batch.region_views, size)
        term = _symmetric_dino(g, s_logits, t_logits, state.teachers["region"], config.batch_regions)
        parts["dino_region"] = term.item()
        terms.append(ops.mul_const(term, config.w_dino_region))

    if stage == STAGE_B and config.w_slide_ce > 0:
        embeds = []
        for patches, grid in zip(batch.slide_patches, batch.slide_grids):
            out = checkpointed_forward(g, model, bound, patches, grid, config.policy)
            embeds.append(out.slide_embed)
        stacked = ops.concat(embeds, axis=0) if len(embeds) > 1 else embeds[0]
        logits = {}
        for task_id, head in state.task_heads.items():
            hb = {k: g.tensor(v, requires_grad=True, name=f"head.{task_id}.{k}") for k, v in head.items()}
            logits[task_id] = task_head_forward(hb, stacked)
        term = multitask_loss(logits, batch.labels)
        parts["slide_ce"] = term.item()
        terms.append(ops.mul_const(term, config.w_slide_ce))

    if not terms:
        raise ConfigError("every loss term is disabled for this stage")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total, parts, teacher_logits


def _trainable(stage: str) -> tuple[str, ...]:
    return _STAGE_A_PREFIXES if stage == STAGE_A else _STAGE_B_PREFIXES


def train_step(state: TrainState, cache: SlideCache, config: CurriculumConfig, stage: str,
               trace: MemoryTrace | None = None) -> StepResult:
    rng = Rng(config.seed).derive("step", state.step)
    batch = sample_batch(rng, cache, config, stage)
    budget = config.policy.fast_budget_bytes
    with Graph(dtype=np.float32, fast_budget_bytes=budget, trace=trace) as g:
        bound = {name: g.tensor(arr, requires_grad=True, name=name) for name, arr in state.model.arrays.items()}
        total, parts, teacher_logits = build_step_losses(g, state, batch, config, stage, bound)
        recompute_backward(total)
        loss_value = total.item()
        prefixes = _trainable(stage)
        grads: dict[str, np.ndarray] = {}
        for t in g.leaves:
            if t.name.startswith(prefixes) and t.grad is not None:
                grads[t.name] = np.array(t.grad, copy=True)
        peak = g.meter.fast_peak_bytes
    state.optimizer.step(grads)

    student_stage1 = {k: v for k, v in state.model.arrays.items() if k.startswith("stage1.")}
    state.teachers["patch"].ema_update(student_stage1, state.dino_heads["dino_patch"])
    student_s12 = {k: v for k, v in state.model.arrays.items() if k.startswith(("stage1.", "stage2."))}
    state.teachers["region"].ema_update(student_s12, state.dino_heads["dino_region"])
    if "patch" in teacher_logits:
        state.teachers["patch"].center_update(teacher_logits["patch"])
    if "region" in teacher_logits:
        state.teachers["region"].center_update(teacher_logits["region"])

    state.step += 1
    state.stage = stage
    return StepResult(loss_total=loss_value, parts=parts, teacher_logits=teacher_logits, fast_peak_bytes=peak)


def batch_mean_entropy(state: TeacherState, logits: np.ndarray) -> float:
    """Entropy of the mean teacher distribution over the batch (collapse probe)."""
    p = state.probs(logits).mean(axis=0)
    p = np.clip(p, 1e-12, None)
    return float(-(p * np.log(p)).sum())


# -- checkpointing of train state --------------------------------------------


def save_train_state(state: TrainState, out_dir: Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state.model.save(out / "model")
    extras = out / "extras"
    extras.mkdir(exist_ok=True)
    for scale, head in state.dino_heads.items():
        for k, v in head.items():
            write_snapshot(extras / f"{scale}.{k}.hptf", v)
    for task_id, head in state.task_heads.items():
        for k, v in head.items():
            write_snapshot(extras / f"head.{task_id}.{k}.hptf", v)
    for name, teacher in state.teachers.items():
        tdir = out / f"teacher_{name}"
        tdir.mkdir(exist_ok=True)
        for k, v in teacher.model_arrays.items():
            write_snapshot(tdir / f"{k}.hptf", v)
        for k, v in teacher.head_arrays.items():
            write_snapshot(tdir / f"head.{k}.hptf", v)
        write_snapshot(tdir / "center.hptf", teacher.center)
    meta = {"step": state.step, "stage": state.stage}
    (out / "state.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunReport:
    stage_a_steps: int
    stage_b_steps: int
    wall_time_s: float
    first_stage_a_loss: float | None
    final_stage_a_loss: float | None
    first_stage_b_loss: float | None
    final_stage_b_loss: float | None
    teacher_entropy_patch: float | None
    teacher_entropy_region: float | None
    max_fast_peak_bytes: int

    def asdict(self) -> dict:
        return dict(self.__dict__)


def run_curriculum(
    config: CurriculumConfig,
    dataset_dir: Path,
    out_dir: Path,
    trace_path: Path | None = None,
) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(dataset_dir)
    cache = SlideCache(manifest, dataset_dir)
    state = init_train_state(config)

    t0 = time.monotonic()
    rows: list[dict] = []
    first_a = final_a = first_b = final_b = None
    ent_patch = ent_region = None
    max_peak = 0

    def record(step_index: int, stage: str, res: StepResult) -> None:
        nonlocal max_peak
        max_peak = max(max_peak, res.fast_peak_bytes)
        rows.append(
            {
                "step": step_index,
                "stage": stage,
                "loss_total": repr(res.loss_total),
                "loss_dino_patch": repr(res.parts["dino_patch"]),
                "loss_dino_region": repr(res.parts["dino_region"]),
                "loss_slide_ce": repr(res.parts["slide_ce"]),
                "fast_peak_bytes": res.fast_peak_bytes,
            }
        )

    try:
        for i in range(config.stage_a_steps):
            want_trace = trace_path is not None and config.stage_b_steps == 0 and i == 0
            trace = MemoryTrace() if want_trace else None
            res = train_step(state, cache, config, STAGE_A, trace=trace)
            if trace is not None:
                trace.dump_jsonl(trace_path)
            if i == 0:
                first_a = res.loss_total
            final_a = res.loss_total
            if i == config.stage_a_steps - 1:
                if "patch" in res.teacher_logits:
                    ent_patch = batch_mean_entropy(state.teachers["patch"], res.teacher_logits["patch"])
                if "region" in res.teacher_logits:
                    ent_region = batch_mean_entropy(state.teachers["region"], res.teacher_logits["region"])
            record(i + 1, STAGE_A, res)
        save_train_state(state, out / "stage_a")

        for i in range(config.stage_b_steps):
            trace = MemoryTrace() if (trace_path is not None and i == 0) else None
            res = train_step(state, cache, config, STAGE_B, trace=trace)
            if trace is not None:
                trace.dump_jsonl(trace_path)
            if i == 0:
                first_b = res.loss_total
            final_b = res.loss_total
            record(config.stage_a_steps + i + 1, STAGE_B, res)
        save_train_state(state, out / "stage_b")
    except Exception:
        # A failing step leaves state at the last completed update; keep it.
        save_train_state(state, out / "aborted")
        raise

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRIC_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)

    report = RunReport(
        stage_a_steps=config.stage_a_steps,
        stage_b_steps=config.stage_b_steps,
        wall_time_s=time.monotonic() - t0,
        first_stage_a_loss=first_a,
        final_stage_a_loss=final_a,
        first_stage_b_loss=first_b,
        final_stage_b_loss=final_b,
        teacher_entropy_patch=ent_patch,
        teacher_entropy_region=ent_region,
        max_fast_peak_bytes=max_peak,
    )
    (out / "run_report.json").write_text(json.dumps(report.asdict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return report
