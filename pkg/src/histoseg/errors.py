"""Exception types shared across the package.

Each maps to one failure category surfaced by the public API; the CLI
translates them into single-line machine-parsable errors.
"""


class HistosegError(Exception):
    """Base class for all package errors."""

    code = "error"


class DimensionError(HistosegError):
    """Operand shapes are incompatible."""

    code = "dimension"


class EmptyKeyError(HistosegError):
    """Attention was given an empty key/value set."""

    code = "empty_key"


class NumericError(HistosegError):
    """A computation produced or received non-finite values."""

    code = "numeric"


class LabelError(HistosegError):
    """A label value is outside its allowed set."""

    code = "label"


class AnnotationError(HistosegError):
    """A polygon or annotation record is malformed."""

    code = "annotation"


class GeometryError(HistosegError):
    """An image/crop/tile geometry precondition failed."""

    code = "geometry"


class InputError(HistosegError):
    """Generic invalid-input failure (empty input, unknown key, ...)."""

    code = "input"


class ManifestError(HistosegError):
    """Corpus directory or manifest contents are inconsistent."""

    code = "manifest"


class GraphError(HistosegError):
    """Not enough points to build the requested neighbor graph."""

    code = "graph"


class ConfigError(HistosegError):
    """Model configuration is invalid or does not match an input."""

    code = "config"


class TrainingError(HistosegError):
    """Training preconditions failed (e.g. empty manifest)."""

    code = "training"


class FitError(HistosegError):
    """A statistical fit has no usable signal (e.g. no events)."""

    code = "fit"


class UndefinedStatisticError(HistosegError):
    """The requested statistic is undefined for this input."""

    code = "undefined"
