"""Deterministic synthetic slides with recoverable planted labels.

Every slide is a raw u8 RGB image. Three pixel codes carry the labels:

* tissue class  -> background palette colour,
* subtype class -> orientation/frequency of a sinusoidal grating on R/G,
* marker tasks  -> a marker-specific zero-mean 4x4 pattern, tiled across a
  carrying patch and added into its blue channel.

The 4x4 patterns are distinct rows of a 16x16 Hadamard matrix, so stamps
from different markers superpose without mixing and a per-patch correlation
against the pattern recovers each marker with a wide margin (the grating
never touches blue, the palette is constant per slide and cancels against
a zero-mean pattern, and pixel noise correlates at under a tenth of the
stamp amplitude). Slide bytes depend only on (seed, geometry, planted
labels), never on wall clock or generation order.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .engine import Rng
from .errors import ConfigError, ContractError, DataError
from .multitask import MISSING, TaskSpec, default_task_registry

TOKEN_PX = 4
PATCH_PX = 16
REGION_SMALL_PX = 64
REGION_LARGE_PX = 256
PATCHES_PER_REGION = (REGION_LARGE_PX // PATCH_PX) ** 2  # 256
MOTIF_AMP = 45.0  # stamp swing per marker; noise correlates at ~0.3
BLUE_MIN = 10
BLUE_MAX = 245

# Tissue identity lives in R/G; blue stays near mid-range on every palette
# so marker stamps keep headroom before the clip bounds.
_TISSUE_PALETTE = np.array(
    [
        [188, 130, 118],
        [150, 170, 121],
        [120, 150, 124],
        [200, 160, 128],
        [140, 120, 132],
        [170, 190, 136],
    ],
    dtype=np.float64,
)

# One (fx, fy) wave vector per subtype class, cycles per pixel.
_SUBTYPE_WAVES = [
    (np.cos(s * np.pi / 8.0) * (1.0 / 32.0 if s % 2 == 0 else 1.0 / 16.0),
     np.sin(s * np.pi / 8.0) * (1.0 / 32.0 if s % 2 == 0 else 1.0 / 16.0))
    for s in range(8)
]
_GRATING_AMP = 24.0
_NOISE_SPAN = 8  # uniform integer noise in [-8, 8]


@dataclass(frozen=True)
class Geometry:
    """Pixel geometry of one slide; grid counts 256px regions per side."""

    grid: int = 1
    token_px: int = TOKEN_PX
    patch_px: int = PATCH_PX
    region_small_px: int = REGION_SMALL_PX
    region_large_px: int = REGION_LARGE_PX

    def __post_init__(self):
        if not 1 <= self.grid <= 4:
            raise ConfigError(f"slide grid must be in [1, 4], got {self.grid}")

    @property
    def slide_px(self) -> int:
        return self.grid * self.region_large_px

    @property
    def n_regions(self) -> int:
        return self.grid * self.grid

    @property
    def patches_per_side(self) -> int:
        return self.slide_px // self.patch_px

    @property
    def n_patches(self) -> int:
        return self.patches_per_side ** 2

    @property
    def n_small_regions(self) -> int:
        return (self.slide_px // self.region_small_px) ** 2

    @property
    def pixel_bytes(self) -> int:
        return 3 * self.slide_px * self.slide_px

    def asdict(self) -> dict:
        return {
            "grid": self.grid,
            "token_px": self.token_px,
            "patch_px": self.patch_px,
            "region_small_px": self.region_small_px,
            "region_large_px": self.region_large_px,
        }

    @classmethod
    def fromdict(cls, d: dict) -> "Geometry":
        return cls(grid=int(d["grid"]))


def _hadamard16() -> np.ndarray:
    h = np.array([[1.0]])
    while h.shape[0] < 16:
        h = np.block([[h, h], [h, -h]])
    return h


_HADAMARD = _hadamard16()


def motif_pattern(marker_index: int) -> np.ndarray:
    """Zero-mean 4x4 stamp (+-1 entries) for one marker.

    Row 0 of the Hadamard matrix is all-ones and would shift the patch mean
    the way a palette change does, so markers start at row 1; that leaves
    15 mutually orthogonal patterns.
    """
    if not 0 <= marker_index < 15:
        raise ContractError(f"marker index {marker_index} outside the 15-pattern family")
    return _HADAMARD[marker_index + 1].reshape(4, 4).copy()


def marker_response(img: np.ndarray, geometry: "Geometry", marker_index: int) -> np.ndarray:
    """Per-patch correlation of the blue channel against one marker stamp.

    Roughly MOTIF_AMP on a carrying patch and near zero elsewhere; thresholding
    at half the amplitude recovers the stamped set. Used by data self-tests.
    """
    tiled = np.tile(motif_pattern(marker_index), (PATCH_PX // TOKEN_PX, PATCH_PX // TOKEN_PX))
    blue = img[:, :, 2].astype(np.float64)
    out = np.empty(geometry.n_patches, dtype=np.float64)
    for i, (r, c) in enumerate(patch_origins(geometry)):
        out[i] = float((blue[r:r + PATCH_PX, c:c + PATCH_PX] * tiled).sum()) / tiled.size
    return out


def stamped_fraction(img: np.ndarray, geometry: "Geometry", marker_index: int) -> float:
    """Fraction of patches whose stamp correlation clears half the amplitude."""
    return float((marker_response(img, geometry, marker_index) >= 0.5 * MOTIF_AMP).mean())


def patch_origins(geometry: Geometry) -> np.ndarray:
    """(n_patches, 2) pixel origins in region-major, patch-row-major order."""
    g = geometry.grid
    per = REGION_LARGE_PX // PATCH_PX
    origins = np.empty((geometry.n_patches, 2), dtype=np.int64)
    i = 0
    for r in range(g * g):
        rr, rc = divmod(r, g)
        for q in range(per * per):
            pr, pc = divmod(q, per)
            origins[i, 0] = rr * REGION_LARGE_PX + pr * PATCH_PX
            origins[i, 1] = rc * REGION_LARGE_PX + pc * PATCH_PX
            i += 1
    return origins


@dataclass
class SlideRecord:
    slide_id: str
    seed: int
    geometry: Geometry
    pixel_path: str
    labels: dict[str, int | None]
    motif_density: dict[str, float]

    def asdict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "seed": self.seed,
            "geometry": self.geometry.asdict(),
            "pixel_path": self.pixel_path,
            "labels": self.labels,
            "motif_density": self.motif_density,
        }

    @classmethod
    def fromdict(cls, d: dict) -> "SlideRecord":
        return cls(
            slide_id=d["slide_id"],
            seed=int(d["seed"]),
            geometry=Geometry.fromdict(d["geometry"]),
            pixel_path=d["pixel_path"],
            labels={k: (None if v is None else int(v)) for k, v in d["labels"].items()},
            motif_density={k: float(v) for k, v in d["motif_density"].items()},
        )

    def label_or_missing(self, task_id: str) -> int:
        v = self.labels.get(task_id)
        return MISSING if v is None else int(v)


def generate_slide(
    slide_id: str,
    seed: int,
    geometry: Geometry,
    registry: list[TaskSpec],
    out_dir: Path,
    planted: dict | None = None,
    missing_rate: float = 0.25,
    theta: float = 0.3,
) -> SlideRecord:
    """Render one slide to <out_dir>/slides/<slide_id>.rgb and return its record.

    planted maps task_id -> class index (or -> float density for a marker
    task); planted tasks are exempt from label missingness. The scalar rng
    draw order is fixed: tissue, subtype, grating phase, noise key, then per
    marker (registry order) its density and stamp placement, then per task
    (registry order) the missingness coin.
    """
    planted = dict(planted or {})
    rng = Rng(seed)
    s_px = geometry.slide_px
    n_patches = geometry.n_patches

    tissue_draw = rng.randint(_TISSUE_PALETTE.shape[0])
    tissue = int(planted.get("tissue", tissue_draw))
    subtype_draw = rng.randint(len(_SUBTYPE_WAVES))
    subtype = int(planted.get("subtype", subtype_draw))
    phase = rng.uniform(0.0, 2.0 * np.pi)

    noise = (rng.uniform_array(3 * s_px * s_px) * (2 * _NOISE_SPAN + 1)).astype(np.int64) - _NOISE_SPAN
    noise = noise.reshape(s_px, s_px, 3).astype(np.float64)

    yy, xx = np.meshgrid(np.arange(s_px), np.arange(s_px), indexing="ij")
    fx, fy = _SUBTYPE_WAVES[subtype]
    grating = np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase) * _GRATING_AMP

    base = _TISSUE_PALETTE[tissue]
    img = np.empty((s_px, s_px, 3), dtype=np.uint8)
    img[:, :, 0] = np.clip(base[0] + grating + noise[:, :, 0], 10, 245).astype(np.uint8)
    img[:, :, 1] = np.clip(base[1] + grating + noise[:, :, 1], 10, 245).astype(np.uint8)

    origins = patch_origins(geometry)
    markers = [t for t in registry if t.category == "biomarker"]
    density: dict[str, float] = {}
    labels: dict[str, int | None] = {"tissue": tissue, "subtype": subtype}

    # stamps accumulate in float so overlapping markers superpose; the blue
    # channel is clipped once at the end
    motif_field = np.zeros((s_px, s_px), dtype=np.float64)
    di = np.arange(PATCH_PX)
    for mi, task in enumerate(markers):
        want = planted.get(task.task_id)
        if isinstance(want, float):
            rho = float(want)
        elif want is not None:
            rho = rng.uniform(0.35, 0.8) if int(want) == 1 else rng.uniform(0.0, 0.22)
        elif planted:
            # cohort slides keep bystander markers sparse so stamps rarely
            # overlap and the planted signal stays clean
            rho = rng.uniform(0.0, 0.22)
        else:
            rho = rng.uniform(0.0, 0.22) if rng.uniform() < 0.6 else rng.uniform(0.35, 0.7)
        n_stamp = int(round(rho * n_patches))
        perm = rng.permutation(n_patches)
        chosen = perm[:n_stamp]
        if n_stamp:
            tiled = np.tile(motif_pattern(mi), (PATCH_PX // TOKEN_PX, PATCH_PX // TOKEN_PX)) * MOTIF_AMP
            rows = origins[chosen, 0]
            cols = origins[chosen, 1]
            # one marker never picks a patch twice, so fancy-index += is safe
            motif_field[rows[:, None, None] + di[None, :, None], cols[:, None, None] + di[None, None, :]] += tiled[
                None, :, :
            ]
        exact = n_stamp / n_patches
        density[task.task_id] = exact
        labels[task.task_id] = int(exact >= theta)

    img[:, :, 2] = np.clip(base[2] + noise[:, :, 2] + motif_field, BLUE_MIN, BLUE_MAX).astype(np.uint8)

    for task in registry:
        if task.task_id in planted:
            continue
        if rng.uniform() < missing_rate:
            labels[task.task_id] = None

    slides_dir = Path(out_dir) / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    rel_path = f"slides/{slide_id}.rgb"
    (Path(out_dir) / rel_path).write_bytes(img.tobytes())

    return SlideRecord(slide_id, seed, geometry, rel_path, labels, density)


@dataclass
class DatasetManifest:
    dataset_id: str
    seed: int
    geometry: Geometry
    primary_task: str | None
    splits: dict[str, list[str]]
    slides: list[SlideRecord]
    registry: list[TaskSpec] = field(default_factory=default_task_registry)

    def asdict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "geometry": self.geometry.asdict(),
            "primary_task": self.primary_task,
            "splits": self.splits,
            "task_registry": [
                {
                    "task_id": t.task_id,
                    "name": t.name,
                    "category": t.category,
                    "class_count": t.class_count,
                    "loss_weight": t.loss_weight,
                }
                for t in self.registry
            ],
            "slides": [s.asdict() for s in self.slides],
        }

    def save(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.asdict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, dataset_dir: Path) -> "DatasetManifest":
        path = Path(dataset_dir) / "manifest.json"
        if not path.is_file():
            raise DataError(f"{path}: dataset manifest not found")
        d = json.loads(path.read_text(encoding="utf-8"))
        registry = [
            TaskSpec(t["task_id"], t["name"], t["category"], int(t["class_count"]), float(t["loss_weight"]))
            for t in d["task_registry"]
        ]
        return cls(
            dataset_id=d["dataset_id"],
            seed=int(d["seed"]),
            geometry=Geometry.fromdict(d["geometry"]),
            primary_task=d["primary_task"],
            splits={k: list(v) for k, v in d["splits"].items()},
            slides=[SlideRecord.fromdict(s) for s in d["slides"]],
            registry=registry,
        )

    def by_id(self) -> dict[str, SlideRecord]:
        return {s.slide_id: s for s in self.slides}


def load_slide_image(record: SlideRecord, dataset_dir: Path) -> np.ndarray:
    """Validate and load the raw (S, S, 3) u8 payload for one slide."""
    path = (Path(dataset_dir) / record.pixel_path).resolve()
    raw = path.read_bytes()
    expected = record.geometry.pixel_bytes
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw)} bytes, geometry needs {expected}")
    s_px = record.geometry.slide_px
    return np.frombuffer(raw, dtype=np.uint8).reshape(s_px, s_px, 3)


def patchify(img: np.ndarray, geometry: Geometry) -> np.ndarray:
    """(S, S, 3) -> (n_patches, 16, 16, 3) in region-major, patch-row-major order."""
    g = geometry.grid
    per = REGION_LARGE_PX // PATCH_PX
    regions = (
        img.reshape(g, REGION_LARGE_PX, g, REGION_LARGE_PX, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, REGION_LARGE_PX, REGION_LARGE_PX, 3)
    )
    patches = (
        regions.reshape(g * g, per, PATCH_PX, per, PATCH_PX, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(g * g * per * per, PATCH_PX, PATCH_PX, 3)
    )
    return np.ascontiguousarray(patches)


def load_slide(record: SlideRecord, dataset_dir: Path) -> np.ndarray:
    return patchify(load_slide_image(record, dataset_dir), record.geometry)


def region_pixels(img: np.ndarray, geometry: Geometry, region_index: int, size_px: int) -> np.ndarray:
    """One size_px x size_px region crop, regions tiled row-major."""
    per_side = geometry.slide_px // size_px
    rr, rc = divmod(region_index, per_side)
    return img[rr * size_px : (rr + 1) * size_px, rc * size_px : (rc + 1) * size_px]


# -- dataset generation ------------------------------------------------------


@dataclass(frozen=True)
class GenSpec:
    """Recipe for one dataset: exact per-class counts per split."""

    dataset_id: str
    seed: int
    grid: int = 1
    primary_task: str | None = None
    train_counts: tuple[int, ...] = ()
    test_counts: tuple[int, ...] = ()
    n_unlabeled_train: int = 0  # slides with no planted class (pretraining pools)
    planted_tissue: int | None = None  # cohort datasets pin one background palette
    missing_rate: float = 0.25
    theta: float = 0.3

    def plan(self) -> list[tuple[str, dict]]:
        """Deterministic slide plan: (split, planted) per slide."""
        tissue = {} if self.planted_tissue is None else {"tissue": int(self.planted_tissue)}
        entries: list[tuple[str, dict]] = []
        for _ in range(self.n_unlabeled_train):
            entries.append(("train", dict(tissue)))
        for split, counts in (("train", self.train_counts), ("test", self.test_counts)):
            for cls, count in enumerate(counts):
                if count < 0:
                    raise ConfigError(f"negative class count in {self.dataset_id}")
                for _ in range(count):
                    planted = {self.primary_task: cls} if self.primary_task else {}
                    planted.update(tissue)
                    entries.append((split, planted))
        return entries


def _render_one(args) -> dict:
    out_dir, slide_id, seed, grid, planted, missing_rate, theta = args
    record = generate_slide(
        slide_id,
        seed,
        Geometry(grid=grid),
        default_task_registry(),
        Path(out_dir),
        planted=planted,
        missing_rate=missing_rate,
        theta=theta,
    )
    return record.asdict()


def generate_dataset(spec: GenSpec, out_root: Path, workers: int = 1) -> DatasetManifest:
    """Render a dataset directory; byte-identical for any worker count."""
    registry = default_task_registry()
    known = {t.task_id for t in registry}
    if spec.primary_task is not None and spec.primary_task not in known:
        raise ConfigError(f"unknown primary task {spec.primary_task!r}")
    out_dir = Path(out_root) / spec.dataset_id
    out_dir.mkdir(parents=True, exist_ok=True)

    master = Rng(spec.seed)
    plan = spec.plan()
    jobs = []
    for idx, (split, planted) in enumerate(plan):
        slide_id = f"{spec.dataset_id}-{idx:04d}"
        seed = master.derive("slide", idx).seed
        jobs.append((str(out_dir), slide_id, seed, spec.grid, planted, spec.missing_rate, spec.theta))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            records = [SlideRecord.fromdict(d) for d in pool.map(_render_one, jobs, chunksize=8)]
    else:
        records = [SlideRecord.fromdict(_render_one(j)) for j in jobs]

    splits: dict[str, list[str]] = {"train": [], "test": []}
    for (split, _), rec in zip(plan, records):
        splits[split].append(rec.slide_id)

    manifest = DatasetManifest(
        dataset_id=spec.dataset_id,
        seed=spec.seed,
        geometry=Geometry(grid=spec.grid),
        primary_task=spec.primary_task,
        splits=splits,
        slides=records,
        registry=registry,
    )
    manifest.save(out_dir)
    return manifest


def make_shuffled_control(dataset_dir: Path, out_root: Path) -> DatasetManifest:
    """Twin manifest with the primary task's train labels permuted.

    Pixel payloads are shared with the source dataset through relative paths;
    only the manifest differs. Test labels stay truthful so a control run
    measures what label-free training can score on real ground truth.
    """
    src = DatasetManifest.load(dataset_dir)
    if src.primary_task is None:
        raise ConfigError(f"{src.dataset_id} has no primary task to shuffle")
    twin_id = f"{src.dataset_id}-shuffled"
    out_dir = Path(out_root) / twin_id
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = Rng(src.seed).derive("label-shuffle")
    train_ids = src.splits["train"]
    by_id = src.by_id()
    values = [by_id[sid].labels.get(src.primary_task) for sid in train_ids]
    perm = rng.permutation(len(values))
    shuffled = {sid: values[perm[i]] for i, sid in enumerate(train_ids)}

    rel_prefix = Path("..") / Path(dataset_dir).name
    slides = []
    for s in src.slides:
        labels = dict(s.labels)
        if s.slide_id in shuffled:
            labels[src.primary_task] = shuffled[s.slide_id]
        slides.append(
            SlideRecord(
                slide_id=s.slide_id,
                seed=s.seed,
                geometry=s.geometry,
                pixel_path=str(rel_prefix / s.pixel_path),
                labels=labels,
                motif_density=dict(s.motif_density),
            )
        )

    manifest = DatasetManifest(
        dataset_id=twin_id,
        seed=src.seed,
        geometry=src.geometry,
        primary_task=src.primary_task,
        splits={k: list(v) for k, v in src.splits.items()},
        slides=slides,
        registry=src.registry,
    )
    manifest.save(out_dir)
    return manifest


# -- presets -----------------------------------------------------------------

# Benchmark recipes: (dataset_id, marker task, (neg, pos) train, (neg, pos) test).
# Counts scale the reference cohort ratios down to desk size while keeping
# each test split populated on both sides; one pair stays 12:2 to preserve an
# extreme-imbalance case.
BENCH_RECIPES = [
    ("bench-luad-tmb", "tmb", (53, 14), (7, 6)),
    ("bench-luad-egfr", "egfr", (57, 10), (12, 2)),
    ("bench-luad-kras", "kras", (49, 5), (14, 7)),
    ("bench-crc-msi", "msi", (53, 17), (13, 4)),
    ("bench-brca-tp53", "tp53", (35, 25), (9, 5)),
    ("bench-brca-pik3ca", "pik3ca", (39, 22), (9, 5)),
    ("bench-rcc-pbrm1", "pbrm1", (32, 32), (9, 9)),
    ("bench-rcc-bap1", "bap1", (52, 13), (15, 2)),
    ("bench-coad-kras", "kras", (40, 23), (9, 6)),
    ("bench-coad-tp53", "tp53", (42, 22), (10, 5)),
]

PRETRAIN_DATASET_ID = "pretrain-mini"
_PRETRAIN_SLIDES = 64

_TINY_RECIPES = [
    ("bench-tiny-a", "tmb", (8, 6), (4, 3)),
    ("bench-tiny-b", "msi", (9, 5), (4, 3)),
]

# each cohort keeps one background palette; markers must carry the signal
_COHORT_TISSUE = {"luad": 0, "crc": 1, "brca": 2, "rcc": 3, "coad": 4, "tiny": 5}


def _cohort_tissue(dataset_id: str) -> int | None:
    parts = dataset_id.split("-")
    if len(parts) >= 2 and parts[0] == "bench":
        return _COHORT_TISSUE.get(parts[1])
    return None


def preset_specs(preset: str, seed: int) -> list[GenSpec]:
    """Named generation suites. 'mini' is the benchmark-grade corpus."""
    base = Rng(seed)
    if preset == "mini":
        recipes, pretrain_n = BENCH_RECIPES, _PRETRAIN_SLIDES
    elif preset == "tiny":
        recipes, pretrain_n = _TINY_RECIPES, 12
    else:
        raise ConfigError(f"unknown preset {preset!r} (expected 'mini' or 'tiny')")
    specs = [
        GenSpec(
            dataset_id=PRETRAIN_DATASET_ID if preset == "mini" else "pretrain-tiny",
            seed=base.derive("dataset", "pretrain").seed,
            grid=1,
            n_unlabeled_train=pretrain_n,
        )
    ]
    for dataset_id, task, train, test in recipes:
        specs.append(
            GenSpec(
                dataset_id=dataset_id,
                seed=base.derive("dataset", dataset_id).seed,
                grid=1,
                primary_task=task,
                train_counts=train,
                test_counts=test,
                planted_tissue=_cohort_tissue(dataset_id),
            )
        )
    return specs


def single_benchmark_spec(name: str, seed: int) -> GenSpec:
    """Train-side-only named recipes (e.g. 'tmb-mini' -> exactly 53:14)."""
    for dataset_id, task, train, _test in BENCH_RECIPES:
        short = dataset_id.split("-", 2)[-1] + "-mini"
        if name == short:
            return GenSpec(
                dataset_id=name,
                seed=Rng(seed).derive("dataset", name).seed,
                grid=1,
                primary_task=task,
                train_counts=train,
                planted_tissue=_cohort_tissue(dataset_id),
            )
    raise ConfigError(f"unknown benchmark preset {name!r}")
