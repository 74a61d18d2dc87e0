"""Exception types shared across the package."""


class VertiSlamError(Exception):
    """Base class for all errors raised by this package."""


class BehindCameraError(VertiSlamError):
    """A point was projected with non-positive depth."""


class DegenerateAngleError(VertiSlamError):
    """SE(3) logarithm requested at a rotation angle of pi."""


class LayoutError(VertiSlamError):
    """Invalid marker layout parameters or lookups."""


class ProfileError(VertiSlamError):
    """Invalid flight profile or visibility configuration."""


class DegenerateConfigurationError(VertiSlamError):
    """Correspondences do not determine a homography or pose."""


class PnPDivergenceError(VertiSlamError):
    """Pose refinement failed to decrease the reprojection cost."""


class GraphValidationError(VertiSlamError):
    """A factor graph violates its structural invariants."""


class DivergenceError(VertiSlamError):
    """Levenberg-Marquardt could not reduce the cost.

    Attributes:
        graph: snapshot of the last accepted state.
        history: accepted cost sequence up to the failure.
    """

    def __init__(self, message, graph=None, history=None):
        super().__init__(message)
        self.graph = graph
        self.history = list(history or [])


class AlignmentError(VertiSlamError):
    """Trajectory association or alignment preconditions failed."""


class SchemaError(VertiSlamError):
    """A file does not follow its expected schema."""


class ManifestError(VertiSlamError):
    """A run manifest does not match the files it references."""
