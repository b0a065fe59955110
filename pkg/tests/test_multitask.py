"""Slide-level multi-task supervision: registry, masking, weighted CE."""

import numpy as np
import pytest

from slidelab.engine import Graph, backward, ops
from slidelab.engine.rng import Rng
from slidelab.errors import ContractError, ShapeError
from slidelab.multitask import (
    BIOMARKER_TASKS,
    MISSING,
    SUBTYPE_CLASSES,
    TISSUE_CLASSES,
    LabelBatch,
    biomarker_index,
    cross_entropy_mean,
    default_task_registry,
    head_forward,
    make_task_heads,
    multitask_loss,
    registry_by_id,
)


def test_registry_has_sixteen_tasks():
    reg = default_task_registry()
    assert len(reg) == 16
    cats = {}
    for t in reg:
        cats.setdefault(t.category, []).append(t)
    assert len(cats["subtyping"]) == 1
    assert len(cats["tissue"]) == 1
    assert len(cats["biomarker"]) == 14
    assert cats["subtyping"][0].class_count == SUBTYPE_CLASSES
    assert cats["tissue"][0].class_count == TISSUE_CLASSES
    for t in cats["biomarker"]:
        assert t.class_count == 2


def test_registry_ids_unique_and_indexable():
    reg = default_task_registry()
    ids = [t.task_id for t in reg]
    assert len(set(ids)) == len(ids)
    by = registry_by_id(reg)
    for t in reg:
        assert by[t.task_id] is t


def test_task_weights_all_one():
    # equal weighting: the loss is a plain mean over present tasks
    for t in default_task_registry():
        assert t.loss_weight == 1.0


def test_biomarker_index_follows_registry_block():
    reg = default_task_registry()
    for i, marker in enumerate(BIOMARKER_TASKS):
        assert biomarker_index(reg, marker) == i
    with pytest.raises(ContractError):
        biomarker_index(reg, "tissue")


def _batch(labels_by_task, weights=None):
    n = len(next(iter(labels_by_task.values())))
    return LabelBatch(
        slide_ids=[f"s{i}" for i in range(n)],
        labels={t: np.asarray(v, dtype=np.int64) for t, v in labels_by_task.items()},
        weights=weights or {},
    )


def _loss_value(logits_np, batch):
    with Graph(dtype=np.float64) as g:
        logits = {t: g.constant(v) for t, v in logits_np.items()}
        loss = multitask_loss(logits, batch)
        return loss.item()


def test_two_task_equal_weight_oracle():
    # task a contributes CE 0.5, task b contributes CE 1.0; mean is 0.75
    pa = np.array([np.exp(-0.5), 1.0 - np.exp(-0.5)])
    pb = np.array([np.exp(-1.0), 1.0 - np.exp(-1.0)])
    logits = {"a": np.log(pa)[None, :], "b": np.log(pb)[None, :]}
    batch = _batch({"a": [0], "b": [0]})
    assert _loss_value(logits, batch) == pytest.approx(0.75, abs=1e-12)


def test_two_task_weighted_oracle():
    pa = np.array([np.exp(-0.5), 1.0 - np.exp(-0.5)])
    pb = np.array([np.exp(-1.0), 1.0 - np.exp(-1.0)])
    logits = {"a": np.log(pa)[None, :], "b": np.log(pb)[None, :]}
    batch = _batch({"a": [0], "b": [0]}, weights={"a": 2.0})
    assert _loss_value(logits, batch) == pytest.approx((2.0 * 0.5 + 1.0) / 3.0, abs=1e-12)


def test_missing_label_rows_are_masked():
    rng = np.random.default_rng(0)
    logits_full = rng.normal(size=(4, 3))
    batch = _batch({"t": [2, MISSING, 1, MISSING]})
    base = _loss_value({"t": logits_full}, batch)
    # perturbing masked rows must not change the loss at all
    poked = logits_full.copy()
    poked[1] += 100.0
    poked[3] -= 55.0
    assert _loss_value({"t": poked}, batch) == base


def test_fully_missing_task_contributes_exactly_zero():
    rng = np.random.default_rng(1)
    logits = {"real": rng.normal(size=(3, 2)), "ghost": rng.normal(size=(3, 2))}
    batch = _batch({"real": [0, 1, 0], "ghost": [MISSING] * 3})
    base = _loss_value(logits, batch)
    poked = {"real": logits["real"], "ghost": logits["ghost"] * 0 + 9.0}
    assert _loss_value(poked, batch) == base
    solo = _batch({"real": [0, 1, 0]})
    assert _loss_value({"real": logits["real"]}, solo) == base


def test_all_tasks_missing_gives_zero_loss():
    logits = {"a": np.ones((2, 2)), "b": np.full((2, 3), -4.0)}
    batch = _batch({"a": [MISSING, MISSING], "b": [MISSING, MISSING]})
    assert _loss_value(logits, batch) == 0.0


def test_empty_logits_dict_rejected():
    with Graph(dtype=np.float64):
        with pytest.raises(ContractError):
            multitask_loss({}, _batch({"a": [0]}))


def test_task_iteration_order_is_canonical():
    # same tasks provided under different dict insertion orders
    rng = np.random.default_rng(2)
    logits = {f"t{i}": rng.normal(size=(5, 2)) for i in range(4)}
    labels = {f"t{i}": rng.integers(0, 2, size=5) for i in range(4)}
    forward = {k: logits[k] for k in ["t0", "t1", "t2", "t3"]}
    backward_order = {k: logits[k] for k in ["t3", "t1", "t0", "t2"]}
    va = _loss_value(forward, _batch(labels))
    vb = _loss_value(backward_order, _batch(labels))
    assert va == vb


def test_cross_entropy_margin_ladder_monotone():
    # pushing the true-class logit up must strictly lower the CE
    vals = []
    for margin in (0.0, 1.0, 2.0, 4.0, 8.0):
        with Graph(dtype=np.float64) as g:
            logits = g.constant(np.array([[margin, 0.0]]))
            ce = cross_entropy_mean(logits, np.array([0]))
            vals.append(ce.item())
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_cross_entropy_uniform_oracle():
    with Graph(dtype=np.float64) as g:
        ce = cross_entropy_mean(g.constant(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert ce.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_label_shape_mismatch():
    with Graph(dtype=np.float64) as g:
        with pytest.raises(ShapeError):
            cross_entropy_mean(g.constant(np.zeros((3, 2))), np.array([0, 1]))


def test_masked_rows_get_zero_gradient():
    with Graph(dtype=np.float64) as g:
        logits = g.tensor(np.random.default_rng(3).normal(size=(3, 2)), requires_grad=True)
        loss = multitask_loss({"t": logits}, _batch({"t": [1, MISSING, 0]}))
        backward(loss)
        grad = logits.grad
    assert np.all(grad[1] == 0.0)
    assert np.any(grad[0] != 0.0)
    assert np.any(grad[2] != 0.0)


def test_label_batch_weight_default():
    batch = _batch({"a": [0]}, weights={"a": 0.5})
    assert batch.weight("a") == 0.5
    assert batch.weight("anything-else") == 1.0


def test_head_forward_shapes_and_determinism():
    reg = default_task_registry()
    heads = make_task_heads(reg, embed_dim=32, rng=Rng(7))
    assert set(heads) == {t.task_id for t in reg}
    embeds = np.random.default_rng(4).normal(size=(5, 32))
    with Graph(dtype=np.float64) as g:
        e = g.constant(embeds)
        for t in reg:
            h = heads[t.task_id]
            params = {"w": g.constant(h.w), "b": g.constant(h.b)}
            assert head_forward(params, e).data.shape == (5, t.class_count)
    heads2 = make_task_heads(reg, embed_dim=32, rng=Rng(7))
    for tid in heads:
        np.testing.assert_array_equal(heads[tid].w, heads2[tid].w)
        np.testing.assert_array_equal(heads[tid].b, heads2[tid].b)


def test_head_named_arrays_use_task_prefix():
    reg = default_task_registry()
    head = make_task_heads(reg, embed_dim=8, rng=Rng(0))["tmb"]
    names = [n for n, _ in head.named_arrays()]
    assert names == ["head.tmb.w", "head.tmb.b"]


def test_head_forward_rejects_bad_embed_dim():
    reg = default_task_registry()
    head = make_task_heads(reg, embed_dim=8, rng=Rng(0))[reg[0].task_id]
    with Graph(dtype=np.float64) as g:
        params = {"w": g.constant(head.w), "b": g.constant(head.b)}
        with pytest.raises(ShapeError):
            head_forward(params, g.constant(np.zeros((2, 9))))
