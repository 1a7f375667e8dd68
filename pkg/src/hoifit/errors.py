class HoifitError(Exception):
    """Base class for library errors."""


class AmbiguousOrientation(HoifitError):
    """Principal axes are not well separated (near-symmetric vertex covariance)."""


class NoNearSurfacePoints(HoifitError):
    """No query point lies within the orientation threshold of the object surface."""


class FlaggedNumericalFault(HoifitError):
    """A non-finite value appeared during evaluation."""


class TrainingDiverged(HoifitError):
    """Training produced a non-finite loss; ``params`` holds the last good checkpoint."""

    def __init__(self, message, params=None, step=None):
        super().__init__(message)
        self.params = params
        self.step = step


class UnsatisfiableScene(HoifitError):
    """A scene's contact intent could not be realised."""
