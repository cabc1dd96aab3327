"""Exception types shared across the toolkit."""


class SceneFitError(Exception):
    """Base class for all scenefit errors."""


class NonFiniteLoss(SceneFitError):
    """An objective evaluated to NaN/Inf (degenerate scene or parameters)."""

    def __init__(self, message="objective value is not finite", step=None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step


class NonFiniteGradient(SceneFitError):
    """A gradient contains NaN/Inf entries.

    ``segments`` names the parameter segments that contain the offending
    indices.
    """

    def __init__(self, segments):
        super().__init__(f"non-finite gradient entries in segments: {sorted(segments)}")
        self.segments = tuple(sorted(segments))


class EmptyCloud(SceneFitError):
    """An operation that needs points received an empty point cloud."""


class EmptyMask(SceneFitError):
    """A mask with no foreground pixels where one is required."""


class FitDiverged(SceneFitError):
    """An ellipsoid MAP fit ended with a worse posterior than it started."""


class VertexOutsideCage(SceneFitError):
    """A mesh vertex lies outside the rest cage during MVC precomputation."""

    def __init__(self, indices):
        idx = list(indices)
        super().__init__(f"{len(idx)} mesh vertices outside the cage, first: {idx[:5]}")
        self.indices = idx


class IsolatedVertex(SceneFitError):
    """A mesh vertex with no neighbors (Laplacian undefined)."""


class NotRenderable(SceneFitError):
    """A scene/object cannot be rendered (invalid geometry)."""


class PlacementFailed(SceneFitError):
    """Rejection sampling failed to place scene objects without overlap."""


class InvalidInput(SceneFitError):
    """Malformed input files or configuration (CLI exit code 1)."""
