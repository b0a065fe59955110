"""Checkpoint policies, byte traces, and the offload schedule model.

Slide forwards segment at region boundaries (or one segment for the whole
patch/region stack). Segment interiors are freed after the unrecorded
forward and recomputed during backward, so the values and the per-parameter
accumulation order match the unsegmented run exactly; policies change only
which bytes stay live. With a finite FAST budget, each segment's boundary
tokens spill to HOST once the segment completes and return on recompute.

offload_plan is the closed-form counterpart: an abstract schedule over
per-region embedding bundles with greedy oldest-first eviction, cheap enough
to enumerate and assert against in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import FAST, HOST, Graph, PoolMeter, Tensor, backward, checkpoint, ops, pool_move
from .errors import BudgetError, ConfigError, ContractError
from .hipt import EMBED_DIM, FullForward, HierarchicalModel, patches_to_tokens
from .synthslide import Geometry, PATCHES_PER_REGION

MODE_NONE = "NONE"
MODE_PER_REGION = "PER_REGION"
MODE_PER_STAGE = "PER_STAGE"
MODES = (MODE_NONE, MODE_PER_REGION, MODE_PER_STAGE)


@dataclass(frozen=True)
class CheckpointPolicy:
    mode: str = MODE_NONE
    fast_budget_bytes: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"checkpoint mode must be one of {MODES}, got {self.mode!r}")
        if self.fast_budget_bytes is not None and self.fast_budget_bytes <= 0:
            raise ConfigError("fast budget must be positive when set")


class MemoryTrace:
    """Ordered pool events. Replay recomputes peaks; mismatch means the
    meter and the trace disagree, which is a bug by definition."""

    def __init__(self):
        self.events: list[dict] = []

    def emit(self, kind: str, **fields) -> None:
        self.events.append({"kind": kind, **fields})

    def replay(self) -> dict:
        live = {FAST: 0, HOST: 0}
        peak = {FAST: 0, HOST: 0}
        moved = {"f2h": 0, "h2f": 0}
        for ev in self.events:
            kind = ev["kind"]
            n = int(ev.get("nbytes", 0))
            if kind == "alloc":
                p = ev["pool"]
                live[p] += n
                peak[p] = max(peak[p], live[p])
            elif kind == "free":
                p = ev["pool"]
                live[p] -= n
                if live[p] < 0:
                    raise ContractError(f"trace replay drove {p} negative")
            elif kind == "move":
                src, dst = ev["src"], ev["dst"]
                live[src] -= n
                live[dst] += n
                if live[src] < 0:
                    raise ContractError(f"trace replay drove {src} negative on move")
                peak[dst] = max(peak[dst], live[dst])
                if src == FAST:
                    moved["f2h"] += n
                else:
                    moved["h2f"] += n
            elif kind == "recompute":
                pass
            else:
                raise ContractError(f"unknown trace event kind {kind!r}")
        return {
            "fast_peak_bytes": peak[FAST],
            "host_peak_bytes": peak[HOST],
            "fast_live_bytes": live[FAST],
            "host_live_bytes": live[HOST],
            "transfer_bytes_fast_to_host": moved["f2h"],
            "transfer_bytes_host_to_fast": moved["h2f"],
        }

    def dump_jsonl(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: Path) -> "MemoryTrace":
        trace = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    trace.events.append(json.loads(line))
        return trace


@dataclass
class SlideOutputs:
    """Checkpointed slide pass: region embeddings, slide embedding, segments."""

    region_embeds: Tensor
    slide_embed: Tensor
    segments: list[dict] = field(default_factory=list)


def checkpointed_forward(
    g: Graph,
    model: HierarchicalModel,
    bound: dict[str, Tensor],
    slide_patches: np.ndarray,
    grid: int,
    policy: CheckpointPolicy,
) -> SlideOutputs:
    """Slide forward under a checkpoint policy, canonical call schedule.

    All modes run stage 1 once per region on a 256-patch batch, stage 2 once
    per region, stage 3 once, in region order, so every mode executes the
    same numpy calls in the same order and the results agree bitwise.
    """
    n_regions = grid * grid
    spill = policy.fast_budget_bytes is not None

    def region_tokens(r: int) -> Tensor:
        chunk = slide_patches[r * PATCHES_PER_REGION : (r + 1) * PATCHES_PER_REGION]
        return g.constant(patches_to_tokens(chunk), name=f"tokens_r{r}")

    def region_body(tokens: Tensor) -> Tensor:
        if tokens.pool == HOST:
            pool_move(tokens, FAST)
        cls1, _ = model.stage1_forward(g, bound, tokens)
        cls2, _ = model.stage2_forward(g, bound, ops.reshape(cls1, (1, PATCHES_PER_REGION, EMBED_DIM)), "large")
        return cls2

    segments: list[dict] = []
    if policy.mode == MODE_NONE:
        region_cls = [region_body(region_tokens(r)) for r in range(n_regions)]
    elif policy.mode == MODE_PER_REGION:
        region_cls = []
        for r in range(n_regions):
            tokens = region_tokens(r)
            cls2 = checkpoint(region_body, (tokens,), segment_id=f"region{r}")
            if spill:
                pool_move(tokens, HOST)
            region_cls.append(cls2)
            segments.append({"segment_id": f"region{r}", "boundary_bytes": tokens.nbytes})
    else:  # one segment spanning stages 1+2 for every region
        tokens_all = [region_tokens(r) for r in range(n_regions)]

        def stack_body(*toks: Tensor) -> Tensor:
            cls_list = []
            for t in toks:
                if t.pool == HOST:
                    pool_move(t, FAST)
                cls_list.append(region_body(t))
            return ops.concat(cls_list, axis=0) if len(cls_list) > 1 else cls_list[0]

        stacked = checkpoint(stack_body, tuple(tokens_all), segment_id="stage12")
        if spill:
            for t in tokens_all:
                pool_move(t, HOST)
        segments.append({"segment_id": "stage12", "boundary_bytes": sum(t.nbytes for t in tokens_all)})
        region_embeds = stacked
        cls3, _ = model.stage3_forward(g, bound, ops.reshape(region_embeds, (1, n_regions, EMBED_DIM)), grid)
        return SlideOutputs(region_embeds=region_embeds, slide_embed=cls3, segments=segments)

    region_embeds = ops.concat(region_cls, axis=0) if len(region_cls) > 1 else region_cls[0]
    cls3, _ = model.stage3_forward(g, bound, ops.reshape(region_embeds, (1, n_regions, EMBED_DIM)), grid)
    return SlideOutputs(region_embeds=region_embeds, slide_embed=cls3, segments=segments)


def recompute_backward(loss: Tensor) -> None:
    """Backward with lazy segment recompute; grads land on bound leaves."""
    backward(loss)


# -- abstract offload schedule ----------------------------------------------


def region_bundle_bytes(dtype_bytes: int = 4, embed_dim: int = EMBED_DIM) -> int:
    """Bytes of one region's retained artifacts: patch embeds + region embed."""
    return PATCHES_PER_REGION * embed_dim * dtype_bytes + embed_dim * dtype_bytes


@dataclass
class OffloadPlan:
    bundle_bytes: int
    budget_bytes: int | None
    events: list[dict]  # the move schedule: {"kind": evict|fetch, "region": r, "nbytes": n}
    full_trace: MemoryTrace  # moves plus allocs/frees, for replay
    peak_bytes: int

    @property
    def f2h_bytes(self) -> int:
        return sum(e["nbytes"] for e in self.events if e["kind"] == "evict")

    @property
    def h2f_bytes(self) -> int:
        return sum(e["nbytes"] for e in self.events if e["kind"] == "fetch")

    def execute(self, meter: PoolMeter) -> None:
        """Drive a real meter through the full trace (the replay oracle)."""
        for ev in self.full_trace.events:
            if ev["kind"] == "alloc":
                meter.alloc(ev["pool"], ev["nbytes"], tag=ev.get("tag", ""))
            elif ev["kind"] == "free":
                meter.free(ev["pool"], ev["nbytes"], tag=ev.get("tag", ""))
            else:
                meter.move(ev["src"], ev["dst"], ev["nbytes"], tag=ev.get("tag", ""))


def offload_plan(geometry: Geometry, fast_budget_bytes: int | None, dtype_bytes: int = 4) -> OffloadPlan:
    """Greedy oldest-first schedule for per-region embedding bundles.

    Forward allocates one bundle per region, evicting the oldest resident
    bundle whenever the next allocation would break the budget. The stage-3
    gather then walks regions in order; spilled bundles are fetched back,
    consumed, and freed. An unlimited budget needs no moves at all.
    """
    n = geometry.n_regions
    bundle = region_bundle_bytes(dtype_bytes=dtype_bytes)
    trace = MemoryTrace()
    events: list[dict] = []
    if fast_budget_bytes is None:
        for r in range(n):
            trace.emit("alloc", pool=FAST, nbytes=bundle, tag=f"bundle{r}")
        peak = n * bundle
        for r in range(n):
            trace.emit("free", pool=FAST, nbytes=bundle, tag=f"bundle{r}")
        return OffloadPlan(bundle, None, events, trace, peak)

    if fast_budget_bytes < bundle:
        raise BudgetError(bundle, fast_budget_bytes, detail="budget below one region bundle")

    resident: list[int] = []
    spilled: set[int] = set()
    live = 0
    peak = 0

    def evict_until_fits() -> None:
        nonlocal live
        while live + bundle > fast_budget_bytes and resident:
            old = resident.pop(0)
            spilled.add(old)
            events.append({"kind": "evict", "region": old, "nbytes": bundle})
            trace.emit("move", src=FAST, dst=HOST, nbytes=bundle, tag=f"bundle{old}")
            live -= bundle

    for r in range(n):
        evict_until_fits()
        if live + bundle > fast_budget_bytes:
            raise BudgetError(live + bundle, fast_budget_bytes, detail=f"bundle{r} does not fit")
        resident.append(r)
        live += bundle
        peak = max(peak, live)
        trace.emit("alloc", pool=FAST, nbytes=bundle, tag=f"bundle{r}")

    for r in range(n):
        if r in spilled:
            evict_until_fits()
            if live + bundle > fast_budget_bytes:
                raise BudgetError(live + bundle, fast_budget_bytes, detail=f"gather of bundle{r}")
            events.append({"kind": "fetch", "region": r, "nbytes": bundle})
            trace.emit("move", src=HOST, dst=FAST, nbytes=bundle, tag=f"bundle{r}")
            live += bundle
            peak = max(peak, live)
            trace.emit("free", pool=FAST, nbytes=bundle, tag=f"bundle{r}")
            live -= bundle
        else:
            resident.remove(r)
            trace.emit("free", pool=FAST, nbytes=bundle, tag=f"bundle{r}")
            live -= bundle

    # anything evicted but never fetched would be a leak; the gather above
    # fetches every spilled bundle, so HOST drains to the fetch total
    return OffloadPlan(bundle, fast_budget_bytes, events, trace, peak)
