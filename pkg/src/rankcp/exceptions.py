"""Exception types raised across the package."""


class RankCPError(ValueError):
    """Base class for rejected inputs and failed preconditions."""


class ShapeError(RankCPError):
    """Operand shapes do not conform to an operation."""


class NonFiniteError(RankCPError):
    """An operation produced NaN or infinite values."""


class CalibrationError(RankCPError):
    """Calibration set too small for the requested miscoverage level."""


class DivergenceError(RankCPError):
    """Training produced a non-finite loss."""


class LeakageError(RankCPError):
    """Evaluation nodes overlap with nodes used during training."""
