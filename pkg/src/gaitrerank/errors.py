"""Error types shared across the pipeline.

Each class maps to a distinct CLI exit code (see ``cli.EXIT_CODES``).
"""

from __future__ import annotations


class ArtifactError(Exception):
    """Base class for all pipeline errors."""

    kind = "error"


class FormatError(ArtifactError):
    """A file does not conform to its declared binary or JSON format."""

    kind = "format"


class ShapeError(ArtifactError):
    """Array dimensions are inconsistent with the declared configuration."""

    kind = "shape"


class DuplicateIdError(ArtifactError):
    """A sequence id occurs more than once where uniqueness is required."""

    kind = "duplicate-id"


class NonFiniteError(ArtifactError):
    """A NaN or infinity appeared in data or in a computed quantity."""

    kind = "non-finite"


class MissingIdError(ArtifactError):
    """A referenced sequence or identity id is not present in its source."""

    kind = "missing-id"


class DataError(ArtifactError):
    """Inputs are structurally valid but unusable (empty gallery, no
    eligible triplets, degenerate score pool, ...)."""

    kind = "data"
