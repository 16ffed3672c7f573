"""Exception types raised across the package."""


class JointReconError(Exception):
    """Base class for all package errors."""


class InvalidGeometry(JointReconError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IndexOutOfRange(JointReconError, IndexError):
    pass


class GeometryVolumeMismatch(JointReconError, ValueError):
    pass


class ShapeMismatch(JointReconError, ValueError):
    pass


class InvalidParameter(JointReconError, ValueError):
    pass


class DimensionTooSmall(JointReconError, ValueError):
    pass


class OutOfDomain(JointReconError, ValueError):
    pass


class NonFiniteValue(JointReconError, ValueError):
    pass


class LineSearchFailure(JointReconError, RuntimeError):
    pass


class NonFiniteObjective(JointReconError, FloatingPointError):
    pass


class InvalidSpec(JointReconError, ValueError):
    pass


class KindMismatch(JointReconError, TypeError):
    pass


class ZeroReference(JointReconError, ZeroDivisionError):
    pass


class CorruptFile(JointReconError, IOError):
    pass


class ConfigInvalid(JointReconError, ValueError):
    def __init__(self, section, message):
        self.section = section
        super().__init__(f"[{section}] {message}")


class PipelineError(JointReconError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
