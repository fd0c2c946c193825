"""Exception types shared across the package.

Every error raised on a violated contract derives from SlamError so callers
can catch the package's failures with a single except clause while tests can
assert on the precise subtype.
"""


class SlamError(Exception):
    """Base class for all package-specific errors."""


class NonRigidInput(SlamError):
    """A 4x4 matrix expected to be a rigid transform is not one."""


class PixelOutOfBounds(SlamError):
    """Pixel coordinates fall outside the image rectangle."""


class OutOfUnitCube(SlamError):
    """A normalized coordinate left the unit cube."""


class OutOfBounds(SlamError):
    """A world point lies outside the scene bounding box."""


class TapeMismatch(SlamError):
    """A backward pass was fed a tape produced by a different forward pass."""


class DegenerateRay(SlamError):
    """All sample weights along a ray vanished."""


class EmptyBatch(SlamError):
    """An operation received zero rays or zero samples."""


class NonFiniteGradient(SlamError):
    """A gradient contained NaN or inf; names the parameter group."""


class TrackingDiverged(SlamError):
    """Tracking ended with a loss far above its starting value."""


class EmptyDatabase(SlamError):
    """The keyframe database has no records to sample."""


class DuplicateKeyframe(SlamError):
    """A frame id was inserted into the keyframe database twice."""


class EmptySurface(SlamError):
    """The SDF volume contains no zero crossing."""


class EmptyMesh(SlamError):
    """A mesh operation produced or received a mesh with no faces."""


class NoValidViews(SlamError):
    """No evaluation view passed the validity checks."""


class CameraInsideGeometry(SlamError):
    """A synthetic camera position is inside or too close to scene geometry."""


class LengthMismatch(SlamError):
    """Two trajectories that must align pose-for-pose have different lengths."""


class MissingFile(SlamError):
    """A dataset file referenced by an index or listing does not exist."""


class NoAssociations(SlamError):
    """Timestamp association produced no color/depth pairs."""


class DatasetError(SlamError):
    """A dataset directory is malformed or unreadable."""


class ConfigError(SlamError):
    """A run configuration is missing fields or violates a constraint."""
