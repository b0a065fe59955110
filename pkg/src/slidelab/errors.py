"""Shared exception taxonomy.

The CLI maps these onto exit codes, so every module raises from this set
instead of bare ValueError/RuntimeError where the failure is contract-level.
"""


class SlidelabError(Exception):
    """Base class for all package-level failures."""


class ContractError(SlidelabError):
    """An operation was called outside its precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible; message names both shapes."""


class NumericDomainError(SlidelabError):
    """Non-finite or out-of-domain values hit an op in checked mode."""


class DeterminismError(SlidelabError):
    """Two evaluations that must agree bitwise did not."""


class BudgetError(SlidelabError):
    """FAST pool budget exceeded.

    Carries the live byte count that the failing event would have produced,
    which doubles as an advisory minimum budget.
    """

    def __init__(self, live_bytes: int, budget_bytes: int, detail: str = ""):
        self.live_bytes = int(live_bytes)
        self.budget_bytes = int(budget_bytes)
        msg = f"FAST budget exceeded: needs {self.live_bytes} bytes, budget {self.budget_bytes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CheckpointError(SlidelabError):
    """Checkpoint/segment bookkeeping is inconsistent."""


class DataError(SlidelabError):
    """Dataset or payload on disk is malformed or truncated."""


class ConfigError(SlidelabError):
    """Run configuration is invalid or internally inconsistent."""


class MetricError(SlidelabError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
