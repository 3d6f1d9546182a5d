"""Exception hierarchy shared by all modules."""


class WarrantySemError(Exception):
    """Base class for package errors."""


class ParameterDomainError(WarrantySemError, ValueError):
    """Parameters outside the admissible domain of a family or structure."""


class DomainError(WarrantySemError, ValueError):
    """Argument outside the domain of a function (quantile level, coordinates)."""


class FitDegenerateError(WarrantySemError):
    """Complete-data MLE does not exist for the supplied data."""

    def __init__(self, message, cycle=None):
        super().__init__(message)
        self.cycle = cycle


class ImputationStallError(WarrantySemError):
    """Acceptance-rejection exceeded its attempt budget for some record."""

    def __init__(self, message, constraint=None, cycle=None):
        super().__init__(message)
        self.constraint = constraint
        self.cycle = cycle


class DataParseError(WarrantySemError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(WarrantySemError, ValueError):
    """Records, scheme and model structure are inconsistent."""


class ConfigError(WarrantySemError, ValueError):
    """Missing, unknown or malformed configuration keys."""


class IntegrationError(WarrantySemError):
    """Numerical quadrature failed to reach the requested tolerance."""


class NotPositiveDefiniteError(WarrantySemError):
    """Information matrix cannot be inverted by Cholesky factorization."""


class StudyError(WarrantySemError):
    """Every replication of a simulation study failed."""


class DataValidationError(WarrantySemError, ValueError):
    """Dataset violates observability or positivity constraints."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(self.violations[:3])
        more = f" (+{len(self.violations) - 3} more)" if len(self.violations) > 3 else ""
        super().__init__(head + more)
