"""Typed errors with stable machine-readable kinds.

Every error the engine can raise carries a short ``kind`` string that the
CLI and HTTP layers forward verbatim, so callers can dispatch on it without
parsing messages.
"""

from __future__ import annotations


class IconforgeError(Exception):
    """Base class; ``kind`` is a stable identifier, the message is free text."""

    kind = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.kind)


class ShapeMismatch(IconforgeError, ValueError):
    kind = "shape"


class NotNifti(IconforgeError, ValueError):
    kind = "not-nifti"


class UnsupportedDtype(IconforgeError, ValueError):
    kind = "unsupported-dtype"


class NotThreeDimensional(IconforgeError, ValueError):
    kind = "not-3d"


class ObliqueUnsupported(IconforgeError, ValueError):
    kind = "oblique-unsupported"


class MissingFile(IconforgeError, FileNotFoundError):
    kind = "missing-file"


class EmptyDataset(IconforgeError, ValueError):
    kind = "empty-dataset"


class Divergence(IconforgeError, RuntimeError):
    kind = "divergence"


class TapeConsumed(IconforgeError, RuntimeError):
    kind = "tape-consumed"


class NonFiniteGradient(IconforgeError, RuntimeError):
    kind = "nonfinite-grad"


class LandmarkCountMismatch(IconforgeError, ValueError):
    kind = "landmark-count"


class BadFormat(IconforgeError, ValueError):
    """Malformed sidecar / manifest / landmark file."""

    kind = "bad-format"
