"""Error types raised across the package.

Each error carries the process exit code the CLI should return for it:
2 for validation failures (bad input, bad config, mismatched artifacts),
1 for internal errors.
"""


class LRTDError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class InvalidRangeError(LRTDError, ValueError):
    exit_code = 2


class DimensionMismatchError(LRTDError, ValueError):
    exit_code = 2


class ConfigError(LRTDError):
    exit_code = 2


class FormatError(LRTDError):
    """Version mismatch, inconsistent array lengths or missing files."""
    exit_code = 2


class HashMismatchError(FormatError):
    pass


class FingerprintMismatchError(LRTDError):
    exit_code = 2


class TrainingDivergedError(LRTDError):
    exit_code = 1


class CalibrationError(LRTDError):
    exit_code = 2


class DisplacementBoundError(LRTDError, AssertionError):
    # A violated displacement bound is a sampler bug, never a data condition.
    exit_code = 1
