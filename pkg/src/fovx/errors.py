"""Typed error hierarchy. CLI maps IoError to exit 2, everything else to 1."""


class FovxError(Exception):
    pass


class FormatError(FovxError):
    """Malformed file contents (bad magic, inconsistent rows)."""


class UnsupportedError(FovxError):
    """Valid file, but a feature outside the supported subset."""


class CorruptError(FovxError):
    """Header and payload disagree."""


class IoError(FovxError):
    """Filesystem-level failure."""


class GridError(FovxError):
    """Operands live on mismatched grids."""


class ValidationError(FovxError):
    """Domain-type invariant violated."""


class DegenerateInputError(FovxError):
    """Input carries no usable signal (all zero, empty mask)."""


class InvalidCutError(FovxError):
    """Requested FOV cut would remove the entire brain."""


class DesignRankError(FovxError):
    """Gradient scheme too collinear for a tensor fit."""


class BasisError(FovxError):
    """Spherical-harmonic bases do not match."""


class NumericalError(FovxError):
    """Non-finite value or singular system where one is not allowed."""


class ShapeError(FovxError):
    """Array shape incompatible with the requested operation."""


class GraphError(FovxError):
    """Autodiff graph misuse (backward through detached/NaN node)."""


class ConfigError(FovxError):
    """Missing or inconsistent run configuration."""


class PairingError(FovxError):
    """Paired-measurement lists of unequal length."""


class SelectionError(FovxError):
    """Model selection found no finite validation score."""
