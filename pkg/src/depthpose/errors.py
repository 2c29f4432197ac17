"""Exception hierarchy shared by all modules."""


class DepthPoseError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NoValidDepth(DepthPoseError):
    """The depth averaging window holds no valid (non-zero) pixel."""


class DegenerateFrame(DepthPoseError):
    """Skeleton joints are coincident or collinear."""


# data
class DataError(DepthPoseError):
    pass


class FormatError(DataError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class MissingIntrinsics(DataError):
    pass


class MissingAnnotation(DataError):
    pass


class MissingPairs(DataError):
    pass


class InvalidSpec(DepthPoseError):
    pass


class ShapeMismatch(DepthPoseError, ValueError):
    pass


class ConfigError(DepthPoseError, ValueError):
    pass


# metrics / evaluation
class AllMasked(DepthPoseError, ValueError):
    pass


class LengthMismatch(DepthPoseError, ValueError):
    pass


class EvalError(DepthPoseError):
    pass
