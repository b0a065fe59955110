"""Central finite-difference verification harness (f64 only)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DeterminismError
from .autodiff import Graph, backward


@dataclass(frozen=True)
class FdReport:
    max_rel_err: float
    worst_param: str
    n_coords: int


def finite_diff_check(build, params, h: float = 1e-5) -> FdReport:
    """Compare reverse-mode grads of a scalar objective against central differences.

    build(graph, tensors) must construct and return a scalar Tensor from the
    given parameter tensors. params is either a list of float64 arrays or a
    dict name -> array (build then receives the same container shape, with
    Tensors in place of arrays). Every coordinate of every array is perturbed.
    The report's max_rel_err is  |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12)
    maximised over coordinates.

    Raises DeterminismError when two evaluations at the same point disagree
    bitwise, since finite differencing is meaningless for a noisy objective.
    """
    if isinstance(params, dict):
        names = list(params)
        arrays = [np.ascontiguousarray(params[k], dtype=np.float64) for k in names]
        pack = lambda ts: dict(zip(names, ts))
    else:
        arrays = [np.ascontiguousarray(p, dtype=np.float64) for p in params]
        names = [str(i) for i in range(len(arrays))]
        pack = lambda ts: ts

    def evaluate(with_grad):
        with Graph(dtype=np.float64) as g:
            ts = [g.tensor(v, requires_grad=with_grad) for v in arrays]
            out = build(g, pack(ts))
            if out.size != 1:
                raise ContractError("finite_diff_check objective must be scalar")
            loss = float(out.data.reshape(()))
            grads = None
            if with_grad:
                backward(out)
                grads = [np.array(t.grad, copy=True) for t in ts]
        return loss, grads

    base, grads = evaluate(with_grad=True)
    again, _ = evaluate(with_grad=False)
    if base != again:
        raise DeterminismError(f"objective is not deterministic: {base!r} vs {again!r}")

    worst = 0.0
    worst_name = ""
    total = 0
    for pi, p in enumerate(arrays):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        total += flat.size
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up, _ = evaluate(with_grad=False)
            flat[j] = keep - h
            dn, _ = evaluate(with_grad=False)
            flat[j] = keep
            fd = (up - dn) / (2.0 * h)
            ad = gflat[j]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-12)
            if err > worst:
                worst = err
                worst_name = names[pi]
    return FdReport(max_rel_err=worst, worst_param=worst_name, n_coords=total)
