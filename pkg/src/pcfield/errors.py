"""Exception types shared across the package.

Every error raised by the library is a subclass of PcfError, so callers can
catch one base type at the CLI boundary. The subclasses double as the
vocabulary of failure modes named in the function contracts.
"""


class PcfError(Exception):
    """Base class for all library errors."""


class DimMismatch(PcfError):
    """Two fields that must share dimensions do not."""


class DegenerateBcs(PcfError):
    """Coordinate system vertices are collinear (area below tolerance)."""


class InsufficientData(PcfError):
    """Fewer valid entries than the operation needs."""


class BadMagic(PcfError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(PcfError):
    """File ends before the payload its header promises."""


class SingularHomography(PcfError):
    """Homography matrix is not invertible."""


class EmptyFlow(PcfError):
    """Flow field has no valid pixels."""


class NoCandidate(PcfError):
    """No non-excluded pixel with positive pooled density remains."""


class DegenerateAfterRetries(PcfError):
    """Vertex sampling failed to produce a non-degenerate triangle."""


class InvalidFlowAtVertex(PcfError):
    """A sampled vertex landed on invalid flow."""


class NonPositiveVariance(PcfError):
    """Gaussian evaluated with variance <= 0."""


class EmptySamples(PcfError):
    """No samples (or fewer than the required minimum) were provided."""


class NonFinite(PcfError):
    """Optimization produced a non-finite loss or gradient."""


class EmptySet(PcfError):
    """Operation on an empty collection that requires at least one entry."""


class LengthMismatch(PcfError):
    """Parallel sequences have different lengths."""


class TooFewPoints(PcfError):
    """Not enough correspondences for model estimation."""


class Degenerate(PcfError):
    """Every minimal sample was degenerate; no model could be fit."""
