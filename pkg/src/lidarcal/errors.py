"""Exception hierarchy shared by every stage of the calibration pipeline."""

from __future__ import annotations


class CalibrationError(Exception):
    """Base class for all errors raised by lidarcal."""


class InvalidParameter(CalibrationError, ValueError):
    pass


class EmptyCloud(CalibrationError):
    pass


class InsufficientPoints(CalibrationError):
    pass


class MissingNormals(CalibrationError):
    pass


class NoFeatures(CalibrationError):
    pass


class NoCorrespondences(CalibrationError):
    pass


class DegenerateCorrespondences(CalibrationError):
    pass


class DegenerateGeometry(CalibrationError):
    pass


class NoPlaneFound(CalibrationError):
    pass


class EmptyScan(CalibrationError):
    pass


class EmptyInput(CalibrationError):
    pass


class UnsupportedFormat(CalibrationError):
    pass


class ConfigError(CalibrationError):
    pass


class ParseError(CalibrationError):
    """Malformed PCD header or body.  ``line`` is 1-based, or None if unknown."""

    def __init__(self, line: int | None, reason: str, path: str | None = None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else ""
        where += f"{line}: " if line is not None else " "
        super().__init__(f"{where}{reason}".strip())


class PartialCalibration(CalibrationError):
    """Raised when the best remaining candidate falls below the fitness threshold.

    ``uncalibrated`` names the sensors that could not be attached to the target;
    ``calibration`` carries whatever was accepted before the loop stopped.
    """

    def __init__(self, uncalibrated, calibration=None):
        self.uncalibrated = frozenset(uncalibrated)
        self.calibration = calibration
        names = ", ".join(sorted(self.uncalibrated))
        super().__init__(f"could not calibrate: {names}")
