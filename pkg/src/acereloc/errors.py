"""Exception hierarchy shared by every module of the package."""


class AceError(Exception):
    """Base class for all package errors."""


class DataError(AceError, ValueError):
    """Raised when input data is malformed or inconsistent (CLI exit code 2)."""


class BehindCamera(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class UnsupportedSize(DataError):
    pass


class EmptyScene(DataError):
    pass


class EmptyDataset(DataError):
    pass


class Degenerate(DataError):
    pass


class NoRealSolution(DataError):
    pass


class TooFewCorrespondences(DataError):
    pass


class InsufficientInliers(DataError):
    pass


class TooFewFrames(DataError):
    pass


class DegeneratePositions(DataError):
    pass


class NoHeads(DataError):
    pass


class InfeasibleSpec(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line=None, message=""):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}" if message else where)


class MissingPose(DataError):
    pass


class UnknownFrame(DataError):
    pass
