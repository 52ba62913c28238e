"""Exception hierarchy shared by every centerseg module."""


class CenterSegError(Exception):
    """Base class for all errors raised by centerseg."""


class DimensionError(CenterSegError, ValueError):
    """Shapes are incompatible for the requested operation."""


class DomainError(CenterSegError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(CenterSegError, RuntimeError):
    """A precondition of an API call was violated."""


class ConfigError(CenterSegError, ValueError):
    """A configuration value is out of its documented range."""


class DataError(CenterSegError, ValueError):
    """Dataset contents violate the dataset contract (e.g. label out of range)."""


class NumericError(CenterSegError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class DatasetIOError(CenterSegError, OSError):
    """A dataset or checkpoint file is missing, unreadable or corrupt."""
