"""Exception types shared across the package."""


class PoseLoopError(Exception):
    """Base class for all poseloop errors."""


class OutOfBoundsError(PoseLoopError):
    """A coordinate lies outside the grid it must index."""


class InvalidSigmaError(PoseLoopError):
    """Gaussian sigma must be strictly positive."""


class ShapeError(PoseLoopError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigError(PoseLoopError):
    """A configuration value violates its documented range."""


class EmptyInputError(PoseLoopError):
    """An operation that needs at least one element received none."""


class EmptyDatasetError(PoseLoopError):
    """Training was asked to run on an empty dataset."""


class ParseError(PoseLoopError):
    """Malformed input text; carries the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PoseLoopError):
    """Well-formed input that violates a named invariant."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if field is not None:
            prefix.append(f"field '{field}'")
        if prefix:
            message = ", ".join(prefix) + ": " + message
        super().__init__(message)


class FormatError(PoseLoopError):
    """A binary container failed header or payload validation."""

    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"bad {field}" + (f": {message}" if message else ""))


class MissingModelError(PoseLoopError):
    """Refinement requires a trained model for every structural group."""


class NoVisibleKeypointsError(PoseLoopError):
    """OKS is undefined when no ground-truth keypoint is visible."""


class SkeletonMismatchError(PoseLoopError):
    """Two reports or records disagree on the skeleton they describe."""
