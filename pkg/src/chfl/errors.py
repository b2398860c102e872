"""Exception types shared across the package."""


class ChflError(Exception):
    """Base class for all package-specific errors."""


class ArchitectureError(ChflError, ValueError):
    """Invalid network architecture (empty or non-positive layer dims)."""


class ShapeError(ChflError, ValueError):
    """Array dimensions are inconsistent with the declared contract."""


class LabelError(ChflError, ValueError):
    """Label matrix is not one-hot or labels fall outside the class range."""


class NumericalError(ChflError, ArithmeticError):
    """Non-finite values encountered; the offending step was aborted."""


class StateError(ChflError, RuntimeError):
    """A cached intermediate does not belong to the parameters it is used with."""


class AggregationError(ChflError, ValueError):
    """Parameter sets passed to the server aggregate are not shape-identical."""


class ConfigError(ChflError, ValueError):
    """Invalid configuration value (counts, fractions, ratios, seeds)."""


class CsvParseError(ChflError, ValueError):
    """Malformed tabular input; message carries the offending row/column."""
