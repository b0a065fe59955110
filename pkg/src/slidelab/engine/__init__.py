"""Tensor engine: RNG, two-pool byte metering, reverse-mode autodiff, snapshots."""

from .rng import Rng, splitmix64, hash_purpose
from .pools import FAST, HOST, PoolMeter
from .autodiff import (
    Graph,
    Tensor,
    backward,
    checkpoint,
    pool_move,
    no_grad,
    ops,
)
from .gradcheck import finite_diff_check
from .snapshot import read_snapshot, write_snapshot

__all__ = [
    "Rng",
    "splitmix64",
    "hash_purpose",
    "FAST",
    "HOST",
    "PoolMeter",
    "Graph",
    "Tensor",
    "backward",
    "checkpoint",
    "pool_move",
    "no_grad",
    "ops",
    "finite_diff_check",
    "read_snapshot",
    "write_snapshot",
]
