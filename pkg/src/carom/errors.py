"""Exception hierarchy shared by every carom module."""


class CaromError(Exception):
    """Base class for all carom errors."""


# --- calibration ---

class CalibrationError(CaromError):
    pass


class TooFewPoints(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class DegenerateHorizon(CalibrationError):
    pass


class AboveHorizon(CaromError):
    """Pixel maps to a point at or beyond the ground plane's horizon."""


class InvalidLutEntry(CaromError):
    """Pixel has no valid ground intersection in the look-up table."""


class EmptyIntersection(CalibrationError):
    """No pixel of the image hits the ground surface."""


class MissingAnchor(CaromError):
    """Map frame has no geodetic anchor configured."""


# --- per-frame pose geometry ---

class HeadingEstimationError(CaromError):
    pass


class InsufficientMotion(HeadingEstimationError):
    pass


class RansacFailure(HeadingEstimationError):
    pass


class InsufficientHistory(HeadingEstimationError):
    pass


class DegenerateDirection(CaromError):
    pass


class DegenerateView(CaromError):
    """Vanishing point falls inside (or too close to) the silhouette."""


class MaskTooSmall(CaromError):
    pass


# --- tracking ---

class NoHistory(CaromError):
    pass


class NonPsdCovariance(CaromError):
    pass


# --- shape reconstruction ---

class EmptyHull(CaromError):
    pass


class EmptyGrid(CaromError):
    pass


class TooFewModels(CaromError):
    pass


class UnknownType(CaromError):
    pass


class DimensionMismatch(CaromError):
    pass


# --- scene / replay ---

class SchemaMismatch(CaromError):
    pass


class MissingCalibration(CaromError):
    pass


class UnknownTrack(CaromError):
    pass


class FrameOutOfLifespan(CaromError):
    pass


class OutOfRange(CaromError):
    pass


# --- synthetic scenarios / evaluation ---

class VehicleOffMap(CaromError):
    pass


class FrameMismatch(CaromError):
    pass


class ConfigError(CaromError):
    pass
