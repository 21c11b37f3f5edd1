from typing import List, Optional


class RouterError(Exception):
    """
    Base class for all errors raised by expert_router

    Each family carries the process exit code used by the CLI
    """
    exit_code = 1


class ConfigError(RouterError):
    exit_code = 2


class DataError(RouterError):
    exit_code = 3


class NumericalError(RouterError):
    exit_code = 4


class RejectedInputError(NumericalError):
    """Non-finite logits handed to the gate"""


class EmptyFeasibleSetError(DataError):
    """Allocation requested for a case with no available expert"""


class DegenerateSupportError(NumericalError):
    """Renormalisation denominator of the conditional allocation fell below the clamp"""


class DegeneratePolicyError(NumericalError):
    """Masked-simplex projection of a vector with no feasible mass"""


class ContractViolationError(DataError):
    """Expert cost read at an index where the expert has no decision"""


class InvalidAnnotationError(DataError):
    pass


class InfeasibleConstraintError(DataError):
    """P(K >= k_min) is numerically zero"""


class NonFiniteLossError(NumericalError):

    def __init__(self, message: str, sample_ids: Optional[List[str]] = None):
        super().__init__(message)
        self.sample_ids = list(sample_ids or [])
