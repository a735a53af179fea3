"""Exception types shared across the package."""


class RigidsegError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(RigidsegError, ValueError):
    """Inputs that must share a dimension (N, K, ...) do not."""


class DegenerateWeights(RigidsegError, ValueError):
    """Weight vector has (effectively) zero mass; no rigid fit is possible."""


class NonFiniteLoss(RigidsegError, RuntimeError):
    """Optimization produced a NaN/inf loss, usually a bad learning rate."""


class GenerationFailed(RigidsegError, RuntimeError):
    """Scene generator exhausted its rejection budget (over-packed config)."""


class SceneFileError(RigidsegError, ValueError):
    """Base class for scene-file format errors."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(SceneFileError):
    """File does not start with the scene-file magic bytes."""


class UnsupportedVersion(SceneFileError):
    """Scene file declares a version this reader does not understand."""


class TruncatedFile(SceneFileError):
    """Scene file ends before a declared block is complete."""


class MissingFlow(SceneFileError):
    """Scene file has no flow block but the caller requires one."""
