"""Three-stage hierarchical vision transformer over slide pyramids.

Stage 1 embeds 16x16 patches (as 4x4 px tokens), stage 2 aggregates patch
embeddings into region embeddings, stage 3 aggregates region embeddings into
one slide embedding. All stages share a width-32, depth-2, 4-head pre-norm
transformer body; only input width and the learned position table differ.

Position tables are sized for the largest input each stage sees. Smaller
inputs index a sub-grid of the table: 64px regions use the center 4x4 of
stage 2's 16x16 patch grid, and slides smaller than 4x4 regions use the
top-left corner of stage 3's grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Graph, Rng, Tensor, ops, read_snapshot, write_snapshot
from .errors import ConfigError, DataError, ShapeError
from .synthslide import PATCHES_PER_REGION, PATCH_PX, TOKEN_PX

STAGES = ("stage1", "stage2", "stage3")
EMBED_DIM = 32

_TOKENS_PER_PATCH = (PATCH_PX // TOKEN_PX) ** 2  # 16
_TOKEN_DIM = TOKEN_PX * TOKEN_PX * 3  # 48
_PATCH_GRID = 16  # patches per region side
_MAX_SLIDE_GRID = 4


@dataclass(frozen=True)
class ViTConfig:
    in_dim: int
    n_pos: int  # table rows including the class-token slot
    embed_dim: int = EMBED_DIM
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"width {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio


def default_configs(embed_dim: int = EMBED_DIM, depth: int = 2, heads: int = 4, mlp_ratio: int = 2) -> dict:
    mk = lambda in_dim, n_pos: ViTConfig(in_dim, n_pos, embed_dim, depth, heads, mlp_ratio)
    return {
        "stage1": mk(_TOKEN_DIM, 1 + _TOKENS_PER_PATCH),
        "stage2": mk(embed_dim, 1 + _PATCH_GRID * _PATCH_GRID),
        "stage3": mk(embed_dim, 1 + _MAX_SLIDE_GRID * _MAX_SLIDE_GRID),
    }


def _stage_param_shapes(cfg: ViTConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, kind) with kind in {normal, zero, one}."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    out: list[tuple[str, tuple, str]] = [
        ("embed_w", (cfg.in_dim, d), "normal"),
        ("embed_b", (d,), "zero"),
        ("cls", (1, d), "normal"),
        ("pos", (cfg.n_pos, d), "normal"),
    ]
    for i in range(cfg.depth):
        out += [
            (f"b{i}.ln1_g", (d,), "one"),
            (f"b{i}.ln1_b", (d,), "zero"),
            (f"b{i}.qkv_w", (d, 3 * d), "normal"),
            # no key bias: softmax is invariant to a per-query constant shift,
            # so a key bias would be an exactly-zero-gradient parameter
            (f"b{i}.q_b", (d,), "zero"),
            (f"b{i}.v_b", (d,), "zero"),
            (f"b{i}.proj_w", (d, d), "normal"),
            (f"b{i}.proj_b", (d,), "zero"),
            (f"b{i}.ln2_g", (d,), "one"),
            (f"b{i}.ln2_b", (d,), "zero"),
            (f"b{i}.fc1_w", (d, h), "normal"),
            (f"b{i}.fc1_b", (h,), "zero"),
            (f"b{i}.fc2_w", (h, d), "normal"),
            (f"b{i}.fc2_b", (d,), "zero"),
        ]
    out += [("ln_f_g", (d,), "one"), ("ln_f_b", (d,), "zero")]
    return out


def init_stage_arrays(cfg: ViTConfig, rng: Rng, dtype=np.float32) -> dict[str, np.ndarray]:
    arrays = {}
    for name, shape, kind in _stage_param_shapes(cfg):
        if kind == "normal":
            n = int(np.prod(shape))
            arr = rng.derive("init", name).truncated_normal_array(n, sigma=0.02).reshape(shape).astype(dtype)
        elif kind == "zero":
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = np.ones(shape, dtype=dtype)
        arrays[name] = arr
    return arrays


# -- position index conventions ---------------------------------------------


def pos_index_stage1() -> np.ndarray:
    return np.arange(1 + _TOKENS_PER_PATCH, dtype=np.int64)


def pos_index_stage2(size: str) -> np.ndarray:
    if size == "large":
        return np.arange(1 + _PATCH_GRID * _PATCH_GRID, dtype=np.int64)
    if size == "small":
        side = 4
        lo = (_PATCH_GRID - side) // 2  # rows/cols 6..9 of the 16x16 grid
        idx = [0] + [1 + r * _PATCH_GRID + c for r in range(lo, lo + side) for c in range(lo, lo + side)]
        return np.asarray(idx, dtype=np.int64)
    raise ConfigError(f"region size must be 'small' or 'large', got {size!r}")


def pos_index_stage3(grid: int) -> np.ndarray:
    if not 1 <= grid <= _MAX_SLIDE_GRID:
        raise ConfigError(f"slide grid {grid} outside [1, {_MAX_SLIDE_GRID}]")
    idx = [0] + [1 + r * _MAX_SLIDE_GRID + c for r in range(grid) for c in range(grid)]
    return np.asarray(idx, dtype=np.int64)


# -- forward -----------------------------------------------------------------


def vit_forward(g: Graph, cfg: ViTConfig, p: dict[str, Tensor], tokens: Tensor, pos_index: np.ndarray):
    """Run one stage. tokens (B, T, in_dim) -> (cls (B, d), tokens (B, T+1, d))."""
    if tokens.ndim != 3 or tokens.shape[2] != cfg.in_dim:
        raise ShapeError(f"stage expects (B, T, {cfg.in_dim}), got {tokens.shape}")
    b, t = tokens.shape[0], tokens.shape[1]
    if len(pos_index) != t + 1:
        raise ShapeError(f"{t} tokens need {t + 1} position ids, got {len(pos_index)}")
    d = cfg.embed_dim

    x = ops.add(ops.matmul(tokens, p["embed_w"]), p["embed_b"])
    cls = ops.broadcast_to(ops.reshape(p["cls"], (1, 1, d)), (b, 1, d))
    x = ops.concat([cls, x], axis=1)
    x = ops.add(x, ops.take_rows(p["pos"], pos_index))

    n = t + 1
    scale = 1.0 / float(np.sqrt(cfg.head_dim))
    for i in range(cfg.depth):
        h = ops.layer_norm(x, p[f"b{i}.ln1_g"], p[f"b{i}.ln1_b"])
        qkv = ops.matmul(h, p[f"b{i}.qkv_w"])
        parts = []
        for j, bias in enumerate((p[f"b{i}.q_b"], None, p[f"b{i}.v_b"])):
            sl = ops.slice(qkv, (slice(None), slice(None), slice(j * d, (j + 1) * d)))
            if bias is not None:
                sl = ops.add(sl, bias)
            sl = ops.reshape(sl, (b, n, cfg.heads, cfg.head_dim))
            parts.append(ops.transpose(sl, (0, 2, 1, 3)))
        q, k, v = parts
        att = ops.softmax(ops.mul_const(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), scale), axis=-1)
        mix = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        mix = ops.add(ops.matmul(mix, p[f"b{i}.proj_w"]), p[f"b{i}.proj_b"])
        x = ops.add(x, mix)

        h = ops.layer_norm(x, p[f"b{i}.ln2_g"], p[f"b{i}.ln2_b"])
        h = ops.gelu(ops.add(ops.matmul(h, p[f"b{i}.fc1_w"]), p[f"b{i}.fc1_b"]))
        h = ops.add(ops.matmul(h, p[f"b{i}.fc2_w"]), p[f"b{i}.fc2_b"])
        x = ops.add(x, h)

    x = ops.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
    cls_out = ops.reshape(ops.slice(x, (slice(None), slice(0, 1), slice(None))), (b, d))
    return cls_out, x


def patches_to_tokens(patches: np.ndarray) -> np.ndarray:
    """(B, 16, 16, 3) pixels -> (B, 16, 48) f32 tokens in [0, 1].

    u8 input is scaled by 1/255; float input is taken as already unit-range
    (augmented views arrive that way)."""
    if patches.ndim != 4 or patches.shape[1:] != (PATCH_PX, PATCH_PX, 3):
        raise ShapeError(f"expected (B, {PATCH_PX}, {PATCH_PX}, 3) patches, got {patches.shape}")
    b = patches.shape[0]
    n = PATCH_PX // TOKEN_PX
    x = patches.astype(np.float32)
    if patches.dtype == np.uint8:
        x = x / np.float32(255.0)
    x = x.reshape(b, n, TOKEN_PX, n, TOKEN_PX, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, n * n, _TOKEN_DIM))


@dataclass
class FullForward:
    """Per-level outputs of a whole-slide pass: (N, d), (g*g, d), (1, d)."""

    patch_embeds: Tensor
    region_embeds: Tensor
    slide_embed: Tensor


class HierarchicalModel:
    """Parameter store for the three stages; forward code binds per graph."""

    def __init__(self, seed: int = 0, configs: dict | None = None, arrays: dict | None = None):
        self.configs = configs or default_configs()
        if set(self.configs) != set(STAGES):
            raise ConfigError(f"model needs exactly stages {STAGES}")
        if arrays is not None:
            self.arrays = arrays
        else:
            rng = Rng(seed)
            self.arrays = {}
            for stage in STAGES:
                stage_arrays = init_stage_arrays(self.configs[stage], rng.derive(stage))
                for name, arr in stage_arrays.items():
                    self.arrays[f"{stage}.{name}"] = arr

    def copy(self) -> "HierarchicalModel":
        return HierarchicalModel(configs=self.configs, arrays={k: v.copy() for k, v in self.arrays.items()})

    def bind(self, g: Graph, train_stages=STAGES) -> dict[str, Tensor]:
        bound = {}
        for name, arr in self.arrays.items():
            stage = name.split(".", 1)[0]
            bound[name] = g.tensor(arr, requires_grad=stage in train_stages, name=name)
        return bound

    @staticmethod
    def stage_view(bound: dict[str, Tensor], stage: str) -> dict[str, Tensor]:
        prefix = stage + "."
        return {k[len(prefix):]: v for k, v in bound.items() if k.startswith(prefix)}

    # stage entry points; tokens/embeds are Tensors already in the graph

    def stage1_forward(self, g: Graph, bound: dict, tokens: Tensor):
        return vit_forward(g, self.configs["stage1"], self.stage_view(bound, "stage1"), tokens, pos_index_stage1())

    def stage2_forward(self, g: Graph, bound: dict, patch_embeds: Tensor, size: str):
        return vit_forward(
            g, self.configs["stage2"], self.stage_view(bound, "stage2"), patch_embeds, pos_index_stage2(size)
        )

    def stage3_forward(self, g: Graph, bound: dict, region_embeds: Tensor, grid: int):
        return vit_forward(
            g, self.configs["stage3"], self.stage_view(bound, "stage3"), region_embeds, pos_index_stage3(grid)
        )

    def full_forward(self, g: Graph, bound: dict, slide_patches: np.ndarray, grid: int) -> "FullForward":
        """Whole-slide pass exposing each level for early-exit feature taps.

        One batched stage-1 call per region, one stage-2 call per region, one
        stage-3 call; this call pattern is the canonical slide schedule that
        recompute-equivalence tests rely on."""
        n_regions = grid * grid
        if slide_patches.shape[0] != n_regions * PATCHES_PER_REGION:
            raise ShapeError(
                f"grid {grid} slide needs {n_regions * PATCHES_PER_REGION} patches, got {slide_patches.shape[0]}"
            )
        patch_cls = []
        region_cls = []
        for r in range(n_regions):
            chunk = slide_patches[r * PATCHES_PER_REGION : (r + 1) * PATCHES_PER_REGION]
            tokens = g.constant(patches_to_tokens(chunk), name=f"tokens_r{r}")
            cls1, _ = self.stage1_forward(g, bound, tokens)
            cls2, _ = self.stage2_forward(g, bound, ops.reshape(cls1, (1, PATCHES_PER_REGION, EMBED_DIM)), "large")
            patch_cls.append(cls1)
            region_cls.append(cls2)
        patch_embeds = ops.concat(patch_cls, axis=0) if len(patch_cls) > 1 else patch_cls[0]
        region_embeds = ops.concat(region_cls, axis=0) if len(region_cls) > 1 else region_cls[0]
        cls3, _ = self.stage3_forward(g, bound, ops.reshape(region_embeds, (1, n_regions, EMBED_DIM)), grid)
        return FullForward(patch_embeds=patch_embeds, region_embeds=region_embeds, slide_embed=cls3)

    # -- persistence ---------------------------------------------------------

    def save(self, out_dir: Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg0 = self.configs["stage1"]
        meta = {
            "embed_dim": cfg0.embed_dim,
            "depth": cfg0.depth,
            "heads": cfg0.heads,
            "mlp_ratio": cfg0.mlp_ratio,
            "params": sorted(self.arrays),
        }
        (out / "config.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        for name, arr in self.arrays.items():
            write_snapshot(out / f"{name}.hptf", arr)

    @classmethod
    def load(cls, in_dir: Path) -> "HierarchicalModel":
        src = Path(in_dir)
        cfg_path = src / "config.json"
        if not cfg_path.is_file():
            raise DataError(f"{cfg_path}: model config not found")
        meta = json.loads(cfg_path.read_text(encoding="utf-8"))
        configs = default_configs(
            embed_dim=int(meta["embed_dim"]),
            depth=int(meta["depth"]),
            heads=int(meta["heads"]),
            mlp_ratio=int(meta["mlp_ratio"]),
        )
        arrays = {name: read_snapshot(src / f"{name}.hptf") for name in meta["params"]}
        model = cls(configs=configs, arrays=arrays)
        expected = set()
        for stage in STAGES:
            for name, shape, _ in _stage_param_shapes(configs[stage]):
                expected.add(f"{stage}.{name}")
                full = f"{stage}.{name}"
                if full in arrays and tuple(arrays[full].shape) != shape:
                    raise DataError(f"{full}: stored shape {arrays[full].shape}, config wants {shape}")
        if expected != set(arrays):
            raise DataError(f"model directory {src} is missing parameters or has extras")
        return model
