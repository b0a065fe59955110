"""Self-verification suites: finite-difference gradient checks over the whole
registered op set plus the composite losses, and fast structural invariants.
The `verify` CLI command runs these; the acceptance tests reuse the same
case lists so there is exactly one inventory."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bench import auroc
from .clam import ClamParams, clam_loss
from .dino import K_PROTOTYPES, dino_loss, init_head_arrays, head_forward, teacher_softmax
from .engine import Graph, Rng, backward, ops
from .engine.gradcheck import finite_diff_check
from .hipt import HierarchicalModel, ViTConfig, vit_forward
from .memory import (
    MODE_NONE,
    MODE_PER_REGION,
    MODE_PER_STAGE,
    CheckpointPolicy,
    checkpointed_forward,
    offload_plan,
    region_bundle_bytes,
)
from .multitask import LabelBatch, cross_entropy_mean, multitask_loss
from .synthslide import Geometry


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    elapsed_s: float


def _project(g: Graph, t, key: int):
    """Reduce a tensor to a scalar through a fixed random projection so every
    output coordinate influences the check."""
    w = np.random.default_rng(1000 + key).normal(size=t.shape)
    return ops.sum(ops.mul(t, g.constant(w)))


def op_gradient_cases() -> list[tuple[str, object, dict]]:
    """(name, build(g, params) -> scalar, f64 params) for every differentiable
    registered op. Domain-restricted ops draw from safe ranges."""
    r = np.random.default_rng(42)
    a34 = r.normal(size=(3, 4))
    b34 = r.normal(size=(3, 4))
    pos34 = np.abs(r.normal(size=(3, 4))) + 1.5
    den34 = r.normal(size=(3, 4)) + np.where(r.normal(size=(3, 4)) >= 0, 2.0, -2.0)
    m45 = r.normal(size=(4, 5))
    vec4 = r.normal(size=4)

    cases: list[tuple[str, object, dict]] = []

    def unary(name, fn, x):
        cases.append((name, lambda g, p, fn=fn: _project(g, fn(p["x"]), len(name)), {"x": x.copy()}))

    def binary(name, fn, x, y):
        cases.append(
            (name, lambda g, p, fn=fn: _project(g, fn(p["x"], p["y"]), len(name)), {"x": x.copy(), "y": y.copy()})
        )

    binary("add", ops.add, a34, b34)
    binary("sub", ops.sub, a34, b34)
    binary("mul", ops.mul, a34, b34)
    binary("div", ops.div, a34, den34)
    unary("add_const", lambda t: ops.add_const(t, 2.5), a34)
    unary("mul_const", lambda t: ops.mul_const(t, -1.7), a34)
    unary("neg", ops.neg, a34)
    unary("pow_const", lambda t: ops.pow_const(t, 1.6), pos34)
    unary("sqrt", ops.sqrt, pos34)
    unary("exp", ops.exp, a34)
    unary("log", ops.log, pos34)
    unary("tanh", ops.tanh, a34)
    unary("sigmoid", ops.sigmoid, a34)
    unary("gelu", ops.gelu, a34)
    binary("matmul", ops.matmul, a34, m45)
    unary("transpose", lambda t: ops.transpose(t, (1, 0)), a34)
    unary("reshape", lambda t: ops.reshape(t, (4, 3)), a34)
    unary("broadcast_to", lambda t: ops.broadcast_to(t, (5, 4)), vec4)
    binary("concat", lambda x, y: ops.concat([x, y], axis=0), a34, b34)
    unary("slice", lambda t: ops.slice(t, (slice(1, 3), slice(0, 2))), a34)
    unary("take_rows", lambda t: ops.take_rows(t, np.asarray([2, 0, 2])), a34)
    unary("sum", lambda t: ops.sum(t, axis=-1), a34)
    unary("sum_all", ops.sum, a34)
    unary("mean", lambda t: ops.mean(t, axis=0), a34)
    unary("softmax", lambda t: ops.softmax(t, axis=-1), a34)
    unary("log_softmax", lambda t: ops.log_softmax(t, axis=-1), a34)
    cases.append(
        (
            "layer_norm",
            lambda g, p: _project(g, ops.layer_norm(p["x"], p["gamma"], p["beta"]), 27),
            {"x": a34.copy(), "gamma": r.normal(size=4), "beta": r.normal(size=4)},
        )
    )
    return cases


def stage_gradient_cases() -> list[tuple[str, object, dict]]:
    """One FD case per ViT stage at 1 block, width 8.

    The check point is chosen so the relative-error ratio measures the
    backward pass and not numerical accidents: near the sigma=0.02 init the
    true gradients sit at the central-difference noise floor, at unit scale
    the attention softmax saturates into near-one-hot rows (same floor,
    other direction), and positional-table rows outside the crop selection
    have structurally zero gradients. So weights are drawn at scale 0.3,
    the table is sized densely (every row read by the forward), and the
    seeds below were picked so no coordinate's gradient falls under 1e-4."""
    from .hipt import _stage_param_shapes

    specs = {
        # stage -> (in_dim, tokens_shape, seed); n_pos = tokens+1, dense
        "stage1": (48, (4, 16, 48), 17),
        "stage2": (8, (4, 16, 8), 44),
        "stage3": (8, (4, 4, 8), 33),
    }
    cases = []
    for stage, (in_dim, tok_shape, seed) in specs.items():
        n_tok = tok_shape[1]
        cfg = ViTConfig(in_dim=in_dim, n_pos=n_tok + 1, embed_dim=8, depth=1, heads=2, mlp_ratio=2)
        r = np.random.default_rng(seed)
        params = {name: r.normal(scale=0.3, size=shape) for name, shape, _ in _stage_param_shapes(cfg)}
        tokens = r.normal(size=tok_shape)
        pos = np.arange(n_tok + 1, dtype=np.int64)

        def build(g, p, cfg=cfg, tokens=tokens, pos=pos):
            cls, _ = vit_forward(g, cfg, p, g.constant(tokens), pos)
            return _project(g, cls, 12345)

        cases.append((f"vit_{stage}", build, params))
    return cases


def loss_gradient_cases() -> list[tuple[str, object, dict]]:
    r = np.random.default_rng(9)

    # DINO: student head + loss against a fixed teacher distribution. Small
    # weight scale keeps student logits/tau_s away from softmax saturation,
    # where true gradients underflow below the FD noise floor.
    embeds = r.normal(scale=0.3, size=(4, 6))
    teacher_logits = r.normal(scale=0.05, size=(4, K_PROTOTYPES))
    center = r.normal(size=K_PROTOTYPES) * 0.01
    dino_params = {
        "fc_w": r.normal(scale=0.3, size=(6, 10)),
        "fc_b": r.normal(scale=0.3, size=10),
        "proto": r.normal(size=(10, K_PROTOTYPES)),
    }

    def build_dino(g, p):
        logits = head_forward(g, p, g.constant(embeds))
        return dino_loss(g, logits, teacher_logits, center, 0.1, 0.04)

    # multitask: two heads over a shared embedding, one label missing
    mt_embeds = r.normal(size=(3, 5))
    mt_params = {
        "wa": r.normal(size=(5, 2)),
        "ba": r.normal(size=2),
        "wb": r.normal(size=(5, 3)),
        "bb": r.normal(size=3),
    }
    batch = LabelBatch(
        slide_ids=["s0", "s1", "s2"],
        labels={"ta": np.asarray([1, -1, 0]), "tb": np.asarray([2, 1, -1])},
        weights={"ta": 1.0, "tb": 2.0},
    )

    def build_mt(g, p):
        x = g.constant(mt_embeds)
        logits = {
            "ta": ops.add(ops.matmul(x, p["wa"]), p["ba"]),
            "tb": ops.add(ops.matmul(x, p["wb"]), p["bb"]),
        }
        return multitask_loss(logits, batch)

    # CLAM: full bag loss, small dims
    feats = r.normal(size=(6, 5))
    clam_params = {k: r.normal(size=v.shape) for k, v in ClamParams.init(Rng(3), embed_dim=5, hidden=4).named_arrays().items()}

    def build_clam(g, p):
        return clam_loss(g, p, g.constant(feats), bag_label=1, k_instances=2, lambda_instance=0.3)

    return [
        ("dino_loss", build_dino, dino_params),
        ("multitask_loss", build_mt, mt_params),
        ("clam_loss", build_clam, clam_params),
    ]


def run_gradient_suite(tol: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, build, params in op_gradient_cases() + stage_gradient_cases() + loss_gradient_cases():
        t0 = time.monotonic()
        rep = finite_diff_check(build, params)
        results.append(
            CheckResult(
                name=f"grad/{name}",
                passed=rep.max_rel_err < tol,
                detail=f"max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_param}",
                elapsed_s=time.monotonic() - t0,
            )
        )
    return results


# -- invariants --------------------------------------------------------------


def _auroc_bruteforce(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def _check(name, fn) -> CheckResult:
    t0 = time.monotonic()
    try:
        detail = fn() or "ok"
        passed = True
    except Exception as exc:  # a failing invariant reports, not raises
        detail = f"{type(exc).__name__}: {exc}"
        passed = False
    return CheckResult(name=name, passed=passed, detail=str(detail), elapsed_s=time.monotonic() - t0)


def _inv_detach():
    with Graph(dtype=np.float64) as g:
        x = g.tensor(np.asarray([1.0, 2.0]), requires_grad=True, name="x")
        y = ops.sum(ops.mul(ops.detach(x), x))  # only the undetached factor carries grad
        backward(y)
        expect = x.data  # d/dx (c * x) with c = detached copy of x
        if not np.array_equal(x.grad, expect):
            raise AssertionError(f"detach leaked gradient: {x.grad} vs {expect}")
    return "stop-gradient exact"


def _inv_auroc():
    r = np.random.default_rng(5)
    for _ in range(50):
        n = int(r.integers(2, 15))
        labels = r.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(r.normal(size=n), 1)
        if auroc(scores, labels) != _auroc_bruteforce(scores, labels):
            raise AssertionError("midrank disagreed with pairwise counting")
    return "midrank == pairwise on 50 random sets"


def _inv_checkpoint_equivalence():
    model = HierarchicalModel(seed=4)
    patches = (np.random.default_rng(8).integers(0, 256, size=(256, 16, 16, 3))).astype(np.uint8)
    grads = {}
    losses = {}
    for mode in (MODE_NONE, MODE_PER_REGION, MODE_PER_STAGE):
        with Graph(dtype=np.float32) as g:
            bound = model.bind(g)
            out = checkpointed_forward(g, model, bound, patches, 1, CheckpointPolicy(mode=mode))
            loss = ops.sum(ops.mul(out.slide_embed, out.slide_embed))
            backward(loss)
            losses[mode] = loss.item()
            grads[mode] = {k: np.array(t.grad, copy=True) for k, t in bound.items()}
    for mode in (MODE_PER_REGION, MODE_PER_STAGE):
        if losses[mode] != losses[MODE_NONE]:
            raise AssertionError(f"{mode} loss diverged")
        for k in grads[MODE_NONE]:
            if not np.array_equal(grads[mode][k], grads[MODE_NONE][k]):
                raise AssertionError(f"{mode} grad {k} diverged")
    return "three policies bitwise-identical on a one-region slide"


def _inv_offload_plan():
    geo = Geometry(grid=2)
    bundle = region_bundle_bytes()
    plan = offload_plan(geo, int(1.25 * bundle))
    if plan.f2h_bytes != plan.h2f_bytes:
        raise AssertionError("unpaired transfers")
    if plan.peak_bytes > int(1.25 * bundle):
        raise AssertionError("plan exceeds budget")
    return f"g=2 tight budget: {plan.f2h_bytes} bytes each way, peak {plan.peak_bytes}"


def _inv_rng_repeat():
    a = Rng(123).derive("x").normal_array(64, 1.0)
    b = Rng(123).derive("x").normal_array(64, 1.0)
    if not np.array_equal(a, b):
        raise AssertionError("rng streams diverged")
    return "derived streams reproducible"


def _inv_teacher_softmax():
    logits = np.random.default_rng(3).normal(size=(5, K_PROTOTYPES))
    center = np.zeros(K_PROTOTYPES)
    p = teacher_softmax(logits, center, 0.04)
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-12):
        raise AssertionError("teacher rows do not normalise")
    return "teacher distribution normalised"


def run_invariant_suite() -> list[CheckResult]:
    return [
        _check("inv/detach_stops_gradient", _inv_detach),
        _check("inv/auroc_pairwise", _inv_auroc),
        _check("inv/checkpoint_equivalence", _inv_checkpoint_equivalence),
        _check("inv/offload_pairing", _inv_offload_plan),
        _check("inv/rng_repeatable", _inv_rng_repeat),
        _check("inv/teacher_softmax", _inv_teacher_softmax),
    ]


def run_all(tol: float = 1e-5) -> tuple[list[CheckResult], bool]:
    results = run_gradient_suite(tol) + run_invariant_suite()
    return results, all(r.passed for r in results)
