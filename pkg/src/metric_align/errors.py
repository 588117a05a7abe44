"""Failure taxonomy shared across the toolkit.

Every anticipated failure raises a named subclass of MetricAlignError so
callers (and the CLI exit-code mapping) can react to the failure kind
instead of parsing messages.
"""


class MetricAlignError(Exception):
    """Base class for all toolkit failures."""


class NonPositiveDepth(MetricAlignError):
    """Projection or back-projection asked for a point at z <= 0."""


class DegenerateInput(MetricAlignError):
    """Input carries no usable signal (e.g. all points at the origin)."""


class NonPositiveScale(MetricAlignError):
    """Closed-form scale came out <= 0, signalling gross misalignment."""


class EmptyModel(MetricAlignError):
    """A mesh or point cloud with no usable vertices."""


class BehindCamera(MetricAlignError):
    """A vertex required to project landed at z <= 0."""


class EmptyRender(MetricAlignError):
    """No triangle projected in front of the camera."""


class NoCovisibleSurface(MetricAlignError):
    """Two views share no mutually visible surface points."""


class AllEmpty(MetricAlignError):
    """Every candidate match set was empty."""


class TooFewCorrespondences(MetricAlignError):
    """PnP needs at least 4 correspondences."""


class NoConsensus(MetricAlignError):
    """RANSAC found no model with an acceptable inlier set."""


class InsufficientOverlap(MetricAlignError):
    """Rendered and observed surfaces share too few paired pixels."""


class NoHypothesis(MetricAlignError):
    """Every pose hypothesis generation path failed."""


class PlacementFailed(MetricAlignError):
    """Scene placement rejected too many samples; bounds too tight."""


class IoFailure(MetricAlignError):
    """A file could not be read, parsed, or written."""


class MalformedInput(MetricAlignError):
    """A file was readable but violates its expected format."""
