"""Exception types shared across the package."""


class DichogeoError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(DichogeoError):
    """A parameter is outside its admissible domain (e.g. phi <= 0)."""


class SchemaError(DichogeoError):
    """Data violates a structural contract (shapes, missing fields, bad cells)."""


class NumericalConditioningError(DichogeoError):
    """A factorization or solve failed even after the jitter policy."""


class UnsupportedSizeError(DichogeoError):
    """A problem size outside the supported range (e.g. quadrature oracle m > 3)."""


class NonConvergenceError(DichogeoError):
    """An inner iterative solver that must converge did not."""


class ConfigError(DichogeoError):
    """A run configuration is invalid or incomplete."""
