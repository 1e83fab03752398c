"""Exception hierarchy shared across the toolkit.

The split matters for the CLI / service surface: ConfigError maps to
exit code 1 (HTTP 400), the runtime failures map to exit code 2 (HTTP 409).
"""


class CtiqError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CtiqError):
    """Tensor dimension mismatch; message names the offending axis."""


class ConfigError(CtiqError):
    """Invalid configuration or missing input file; message names the field."""


class FeasibilityError(CtiqError):
    """Smoothing parameters cannot produce valid percentile indices."""


class DataFormatError(CtiqError):
    """Corrupt or truncated container; message names the failing entry."""


class DegenerateDataError(CtiqError):
    """Correlation undefined (zero variance in one of the inputs)."""
