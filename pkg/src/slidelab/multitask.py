"""Slide-level task registry, per-task linear heads, masked multi-task loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Rng, Tensor, ops
from .errors import ContractError, ShapeError

MISSING = -1

SUBTYPE_CLASSES = 8
TISSUE_CLASSES = 6

# Binary marker tasks; the first block backs the benchmark presets.
BIOMARKER_TASKS = (
    "tmb",
    "egfr",
    "kras",
    "msi",
    "tp53",
    "pik3ca",
    "pbrm1",
    "bap1",
    "braf",
    "her2",
    "er",
    "pr",
    "idh1",
    "alk",
)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    category: str  # "subtyping" | "tissue" | "biomarker"
    class_count: int
    loss_weight: float = 1.0


def default_task_registry() -> list[TaskSpec]:
    """One subtyping head, one tissue head, fourteen binary marker heads."""
    tasks = [
        TaskSpec("subtype", "morphological subtype", "subtyping", SUBTYPE_CLASSES),
        TaskSpec("tissue", "tissue of origin", "tissue", TISSUE_CLASSES),
    ]
    for marker in BIOMARKER_TASKS:
        tasks.append(TaskSpec(marker, f"{marker} marker status", "biomarker", 2))
    return tasks


def registry_by_id(registry: list[TaskSpec]) -> dict[str, TaskSpec]:
    return {t.task_id: t for t in registry}


def biomarker_index(registry: list[TaskSpec], task_id: str) -> int:
    """Position of a biomarker task among the registry's biomarker block."""
    markers = [t.task_id for t in registry if t.category == "biomarker"]
    try:
        return markers.index(task_id)
    except ValueError:
        raise ContractError(f"{task_id!r} is not a biomarker task") from None


class TaskHead:
    """Affine map from the slide embedding to task logits."""

    def __init__(self, spec: TaskSpec, embed_dim: int, rng: Rng):
        self.spec = spec
        self.embed_dim = embed_dim
        self.w = rng.truncated_normal_array(embed_dim * spec.class_count, 0.02).reshape(
            embed_dim, spec.class_count
        ).astype(np.float32)
        self.b = np.zeros(spec.class_count, dtype=np.float32)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f"head.{self.spec.task_id}.w", self.w), (f"head.{self.spec.task_id}.b", self.b)]


def make_task_heads(registry: list[TaskSpec], embed_dim: int, rng: Rng) -> dict[str, TaskHead]:
    return {spec.task_id: TaskHead(spec, embed_dim, rng.derive("head", spec.task_id)) for spec in registry}


def head_forward(head_params: dict[str, Tensor], embeds: Tensor) -> Tensor:
    """embeds (B, d) -> logits (B, C) through the adopted head tensors."""
    return ops.add(ops.matmul(embeds, head_params["w"]), head_params["b"])


@dataclass
class LabelBatch:
    """Per-task integer labels for a batch of slides; MISSING marks absences."""

    slide_ids: list[str]
    labels: dict[str, np.ndarray]
    weights: dict[str, float] = field(default_factory=dict)

    def weight(self, task_id: str) -> float:
        return self.weights.get(task_id, 1.0)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for (n, C) logits against int labels."""
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    g = logits.graph
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.mul(logp, g.constant(onehot))
    return ops.mul_const(ops.mean(ops.sum(picked, axis=-1)), -1.0)


def multitask_loss(logits: dict[str, Tensor], batch: LabelBatch) -> Tensor:
    """Weighted mean of per-task CE over tasks with at least one present label.

    Tasks whose labels are all MISSING are excluded structurally: their logit
    rows never enter the graph, so the loss and every gradient are exactly
    independent of them. Tasks are combined in sorted task_id order, which
    makes the result invariant to registration order bit for bit. When every
    task is fully missing the loss is the constant 0 with no graph edges.
    """
    terms: list[tuple[Tensor, float]] = []
    for task_id in sorted(logits):
        if task_id not in batch.labels:
            continue
        labels = np.asarray(batch.labels[task_id])
        idx = np.flatnonzero(labels != MISSING)
        if idx.size == 0:
            continue
        rows = ops.take_rows(logits[task_id], idx)
        ce = cross_entropy_mean(rows, labels[idx])
        terms.append((ce, batch.weight(task_id)))

    if not terms:
        if not logits:
            raise ContractError("multitask_loss needs at least one logits entry")
        g = next(iter(logits.values())).graph
        return g.constant(0.0)

    total_weight = sum(w for _, w in terms)
    acc = None
    for ce, w in terms:
        term = ops.mul_const(ce, w)
        acc = term if acc is None else ops.add(acc, term)
    return ops.mul_const(acc, 1.0 / total_weight)
