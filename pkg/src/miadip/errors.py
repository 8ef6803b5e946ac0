"""Error taxonomy shared across the package.

Config-shaped problems (bad values, bad files, impossible requests) map to
CLI exit code 2; runtime and numeric failures map to exit code 3.
"""


class MiadipError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(MiadipError):
    """Invalid configuration value, unknown key, or impossible request."""


class ParseError(ConfigError):
    """Malformed input file. Message carries a 1-based line number."""


class ShapeError(MiadipError):
    """Tensor shape or label-range mismatch."""


class NumericError(MiadipError):
    """Non-finite value where a finite one is required."""


class TrainingError(MiadipError):
    """Training diverged or could not run."""


class SplitError(MiadipError):
    """Membership split request that cannot be satisfied."""


class CalibrationError(MiadipError):
    """Threshold calibration on degenerate input (e.g. one-class labels)."""


class MetricError(MiadipError):
    """Confusion metrics on degenerate input."""


class CheckpointError(MiadipError):
    """Unreadable or version-mismatched checkpoint file."""


class ExperimentError(MiadipError):
    """Pipeline failure, tagged with the stage that caused it."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
