"""Exception hierarchy shared by every module."""


class CfrlError(Exception):
    """Base class for all library errors."""


class ArgumentError(CfrlError, ValueError):
    """Invalid argument value, shape or count."""


class CoverageError(CfrlError, ValueError):
    """A required (action, attribute) cell or attribute value has no data."""


class RankDeficiencyError(CfrlError, ArithmeticError):
    """Unregularised least-squares system is singular."""

    def __init__(self, null_directions: int, dimension: int):
        self.null_directions = null_directions
        self.dimension = dimension
        super().__init__(
            f"design matrix is rank deficient: {null_directions} null "
            f"direction(s) out of {dimension}; use ridge > 0"
        )


class DivergenceError(CfrlError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ProtocolError(CfrlError, RuntimeError):
    """Online deployment call out of order (buffer/step mismatch)."""


class UnsupportedOperationError(CfrlError, RuntimeError):
    """Operation needs information the data does not carry (e.g. noise records)."""


class RegressionFailure(CfrlError, RuntimeError):
    """A regression step inside an iterative fit failed."""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        super().__init__(f"regression failed at iteration {iteration}: {cause}")
