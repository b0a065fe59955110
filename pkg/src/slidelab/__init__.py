"""Desk-scale hierarchical slide pipeline: synthetic slides, tiny ViT stack, benchmarks."""

import os

# Pin BLAS thread pools before numpy loads them: keeps small-matrix kernels
# deterministic across runs and avoids oversubscription when worker processes fork.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
