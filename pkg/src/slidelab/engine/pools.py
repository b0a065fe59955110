"""Two-pool byte accounting.

FAST models the compute-attached pool, HOST the spill pool. The meter tracks
logical liveness driven by explicit engine events; it never inspects Python
object lifetimes. Budgets apply to FAST only.
"""

from __future__ import annotations

from ..errors import BudgetError, ContractError

FAST = "FAST"
HOST = "HOST"
_POOLS = (FAST, HOST)


class PoolMeter:
    """Live/peak byte counters per pool plus monotone transfer counters."""

    __slots__ = (
        "fast_live_bytes",
        "fast_peak_bytes",
        "host_live_bytes",
        "host_peak_bytes",
        "transfer_bytes_fast_to_host",
        "transfer_bytes_host_to_fast",
        "fast_budget_bytes",
        "trace",
    )

    def __init__(self, fast_budget_bytes: int | None = None, trace=None):
        self.fast_live_bytes = 0
        self.fast_peak_bytes = 0
        self.host_live_bytes = 0
        self.host_peak_bytes = 0
        self.transfer_bytes_fast_to_host = 0
        self.transfer_bytes_host_to_fast = 0
        self.fast_budget_bytes = fast_budget_bytes
        self.trace = trace

    def _check(self, pool: str) -> None:
        if pool not in _POOLS:
            raise ContractError(f"unknown pool {pool!r}")

    def alloc(self, pool: str, nbytes: int, tag: str = "") -> None:
        self._check(pool)
        if nbytes < 0:
            raise ContractError("negative allocation")
        if pool == FAST:
            new_live = self.fast_live_bytes + nbytes
            if self.fast_budget_bytes is not None and new_live > self.fast_budget_bytes:
                raise BudgetError(new_live, self.fast_budget_bytes, detail=tag or "alloc")
            self.fast_live_bytes = new_live
            if new_live > self.fast_peak_bytes:
                self.fast_peak_bytes = new_live
        else:
            self.host_live_bytes += nbytes
            if self.host_live_bytes > self.host_peak_bytes:
                self.host_peak_bytes = self.host_live_bytes
        if self.trace is not None:
            self.trace.emit("alloc", pool=pool, nbytes=nbytes, tag=tag)

    def free(self, pool: str, nbytes: int, tag: str = "") -> None:
        self._check(pool)
        if pool == FAST:
            self.fast_live_bytes -= nbytes
            live = self.fast_live_bytes
        else:
            self.host_live_bytes -= nbytes
            live = self.host_live_bytes
        if live < 0:
            raise ContractError(f"{pool} live bytes went negative ({live})")
        if self.trace is not None:
            self.trace.emit("free", pool=pool, nbytes=nbytes, tag=tag)

    def move(self, src: str, dst: str, nbytes: int, tag: str = "") -> None:
        self._check(src)
        self._check(dst)
        if src == dst:
            return
        if dst == FAST:
            new_live = self.fast_live_bytes + nbytes
            if self.fast_budget_bytes is not None and new_live > self.fast_budget_bytes:
                raise BudgetError(new_live, self.fast_budget_bytes, detail=tag or "move")
            self.host_live_bytes -= nbytes
            if self.host_live_bytes < 0:
                raise ContractError("HOST live bytes went negative on move")
            self.fast_live_bytes = new_live
            if new_live > self.fast_peak_bytes:
                self.fast_peak_bytes = new_live
            self.transfer_bytes_host_to_fast += nbytes
        else:
            self.fast_live_bytes -= nbytes
            if self.fast_live_bytes < 0:
                raise ContractError("FAST live bytes went negative on move")
            self.host_live_bytes += nbytes
            if self.host_live_bytes > self.host_peak_bytes:
                self.host_peak_bytes = self.host_live_bytes
            self.transfer_bytes_fast_to_host += nbytes
        if self.trace is not None:
            self.trace.emit("move", src=src, dst=dst, nbytes=nbytes, tag=tag)

    @property
    def total_live_bytes(self) -> int:
        return self.fast_live_bytes + self.host_live_bytes

    def counters(self) -> dict:
        return {
            "fast_live_bytes": self.fast_live_bytes,
            "fast_peak_bytes": self.fast_peak_bytes,
            "host_live_bytes": self.host_live_bytes,
            "host_peak_bytes": self.host_peak_bytes,
            "transfer_bytes_fast_to_host": self.transfer_bytes_fast_to_host,
            "transfer_bytes_host_to_fast": self.transfer_bytes_host_to_fast,
        }
