"""Exception types shared across the package."""


class DomainError(ValueError):
    """Numerical input outside the mathematically valid domain."""


class ConfigurationError(ValueError):
    """Model or term specification that cannot be assembled."""


class IngestionError(ValueError):
    """Malformed input data (CSV contents, column roles, codings)."""


class InferenceError(RuntimeError):
    """Post-fit computation failed (singular curvature, bad fit state)."""
