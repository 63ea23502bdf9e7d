class CrpsLamError(Exception):
    """Base class for all package errors."""


class DimensionError(CrpsLamError, ValueError):
    pass


class NumericError(CrpsLamError, ArithmeticError):
    pass


class ContractError(CrpsLamError, RuntimeError):
    pass


class ConfigError(CrpsLamError, ValueError):
    pass


class DataError(CrpsLamError, ValueError):
    pass


class EstimatorError(CrpsLamError, ValueError):
    """Raised when an estimator is requested outside its domain (e.g. fair CRPS with N < 2)."""
