"""Teacher-student self-distillation: EMA teacher, centering, sharpening.

The loss runs at two scales. The patch scale distills stage-1 class tokens;
the region scale distills stage-2 class tokens computed on augmented region
views. Each scale owns a full teacher copy of the stages it touches plus its
own projection head and center vector, updated only by EMA and centering,
never by gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Graph, Rng, Tensor, ops
from .errors import ContractError, ShapeError

K_PROTOTYPES = 32
HEAD_HIDDEN = 64
STUDENT_TEMP = 0.1
TEACHER_TEMP = 0.04
EMA_MOMENTUM = 0.996
CENTER_MOMENTUM = 0.9
JITTER = 0.1
CROP_AREA = 0.75


def init_head_arrays(rng: Rng, embed_dim: int = 32, dtype=np.float32) -> dict[str, np.ndarray]:
    # fan-in scale, not the encoder's 0.02: the head must amplify small
    # embedding differences into logit gaps the sharpened teacher can see
    def tn(name, shape, sigma):
        n = int(np.prod(shape))
        return rng.derive("init", name).truncated_normal_array(n, sigma=sigma).reshape(shape).astype(dtype)

    return {
        "fc_w": tn("fc_w", (embed_dim, HEAD_HIDDEN), embed_dim**-0.5),
        "fc_b": np.zeros(HEAD_HIDDEN, dtype=dtype),
        "proto": tn("proto", (HEAD_HIDDEN, K_PROTOTYPES), HEAD_HIDDEN**-0.5),
    }


def head_forward(g: Graph, p: dict[str, Tensor], x: Tensor) -> Tensor:
    """(B, d) embeddings -> (B, K) prototype logits; final layer weight-normalized."""
    h = ops.gelu(ops.add(ops.matmul(x, p["fc_w"]), p["fc_b"]))
    proto = p["proto"]
    sq = ops.sum(ops.mul(proto, proto), axis=0, keepdims=True)
    normed = ops.div(proto, ops.sqrt(ops.add_const(sq, 1e-12)))
    return ops.matmul(h, normed)


def teacher_softmax(teacher_logits: np.ndarray, center: np.ndarray, tau_t: float = TEACHER_TEMP) -> np.ndarray:
    """Centered, sharpened teacher distribution, plain numpy (stop-gradient)."""
    z = (np.asarray(teacher_logits, dtype=np.float64) - np.asarray(center, dtype=np.float64)) / tau_t
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(g: Graph, student_logits: Tensor, teacher_logits: np.ndarray, center: np.ndarray,
              tau_s: float = STUDENT_TEMP, tau_t: float = TEACHER_TEMP) -> Tensor:
    """Cross-entropy from the centered teacher distribution to the student.

    teacher_logits enters as a plain array, so no gradient can reach the
    teacher or the center by construction. Batched inputs average over rows.
    """
    if student_logits.ndim != 2:
        raise ShapeError(f"student logits must be (B, K), got {student_logits.shape}")
    if tuple(teacher_logits.shape) != tuple(student_logits.shape):
        raise ShapeError(f"teacher {teacher_logits.shape} vs student {student_logits.shape}")
    p_t = teacher_softmax(teacher_logits, center, tau_t).astype(student_logits.data.dtype)
    log_p_s = ops.log_softmax(ops.mul_const(student_logits, 1.0 / tau_s), axis=-1)
    per_row = ops.sum(ops.mul(g.constant(p_t), log_p_s), axis=-1)
    return ops.neg(ops.mean(per_row))


@dataclass
class TeacherState:
    """EMA twin of the stages one distillation scale trains, plus head and center."""

    model_arrays: dict[str, np.ndarray]
    head_arrays: dict[str, np.ndarray]
    center: np.ndarray = field(default_factory=lambda: np.zeros(K_PROTOTYPES, dtype=np.float64))
    momentum: float = EMA_MOMENTUM
    center_momentum: float = CENTER_MOMENTUM
    tau_s: float = STUDENT_TEMP
    tau_t: float = TEACHER_TEMP

    def __post_init__(self):
        if not (0.0 <= self.momentum <= 1.0 and 0.0 <= self.center_momentum <= 1.0):
            raise ContractError("momenta must sit in [0, 1]")

    @classmethod
    def from_student(cls, model_arrays: dict[str, np.ndarray], head_arrays: dict[str, np.ndarray], **kw):
        return cls(
            model_arrays={k: v.copy() for k, v in model_arrays.items()},
            head_arrays={k: v.copy() for k, v in head_arrays.items()},
            **kw,
        )

    def ema_update(self, student_model: dict[str, np.ndarray], student_head: dict[str, np.ndarray]) -> None:
        m = self.momentum
        for name, arr in self.model_arrays.items():
            np.add(m * arr, (1.0 - m) * student_model[name], out=arr, casting="unsafe")
        for name, arr in self.head_arrays.items():
            np.add(m * arr, (1.0 - m) * student_head[name], out=arr, casting="unsafe")

    def warm_start_center(self, batch_teacher_logits: np.ndarray) -> None:
        """Seed a cold (all-zero) center with the first batch's mean logits.

        At init the teacher shares every parameter with the student, so raw
        logits carry a large common bias that centering will remove over the
        next few dozen steps anyway. Measuring early losses against that bias
        makes step one look artificially easy; seeding the center removes the
        transient without touching the update rule.
        """
        if batch_teacher_logits.ndim != 2 or batch_teacher_logits.shape[0] < 1:
            raise ShapeError(f"warm start needs (B, K) logits, got {batch_teacher_logits.shape}")
        if batch_teacher_logits.shape[1] != self.center.shape[0]:
            raise ShapeError(
                f"logit width {batch_teacher_logits.shape[1]} vs center length {self.center.shape[0]}"
            )
        self.center = batch_teacher_logits.mean(axis=0, dtype=np.float64)

    def center_update(self, batch_teacher_logits: np.ndarray) -> None:
        if batch_teacher_logits.ndim != 2 or batch_teacher_logits.shape[0] < 1:
            raise ShapeError(f"center update needs (B, K) logits, got {batch_teacher_logits.shape}")
        if batch_teacher_logits.shape[1] != self.center.shape[0]:
            raise ShapeError(
                f"logit width {batch_teacher_logits.shape[1]} vs center length {self.center.shape[0]}"
            )
        lam = self.center_momentum
        mean = batch_teacher_logits.mean(axis=0, dtype=np.float64)
        self.center = lam * self.center + (1.0 - lam) * mean

    def probs(self, teacher_logits: np.ndarray) -> np.ndarray:
        return teacher_softmax(teacher_logits, self.center, self.tau_t)


# -- augmentation ------------------------------------------------------------


def _jitter_and_flip(view: np.ndarray, rng: Rng) -> np.ndarray:
    if rng.uniform() < 0.5:
        view = view[::-1, :, :]
    if rng.uniform() < 0.5:
        view = view[:, ::-1, :]
    shift = np.array([rng.uniform(-JITTER, JITTER) for _ in range(3)], dtype=np.float32)
    return np.clip(view + shift[None, None, :], 0.0, 1.0).astype(np.float32)


def _crop_resize(pix: np.ndarray, rng: Rng) -> np.ndarray:
    s = pix.shape[0]
    side = int(round(np.sqrt(CROP_AREA) * s))
    cy = rng.randint(s - side + 1)
    cx = rng.randint(s - side + 1)
    crop = pix[cy : cy + side, cx : cx + side]
    idx = (np.arange(s, dtype=np.int64) * side) // s
    return crop[idx][:, idx]


def make_views(pixels: np.ndarray, rng: Rng, crop: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Two augmented f32 copies in [0, 1] of one u8/float image (S, S, 3).

    Per view, in fixed draw order: optional 75%-area crop resized back by
    nearest neighbor, then vertical flip coin, horizontal flip coin, and one
    jitter offset per channel.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"views need a square (S, S, 3) image, got {pixels.shape}")
    base = pixels.astype(np.float32)
    if pixels.dtype == np.uint8:
        base = base / np.float32(255.0)
    out = []
    for _ in range(2):
        v = _crop_resize(base, rng) if crop else base
        out.append(_jitter_and_flip(v, rng))
    return out[0], out[1]


def view_to_patches(view: np.ndarray, patch_px: int = 16) -> np.ndarray:
    """(S, S, 3) -> (n*n, patch_px, patch_px, 3), patches row-major."""
    s = view.shape[0]
    if s % patch_px:
        raise ShapeError(f"view side {s} not divisible by patch size {patch_px}")
    n = s // patch_px
    x = view.reshape(n, patch_px, n, patch_px, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(n * n, patch_px, patch_px, 3))
