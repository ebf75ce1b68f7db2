"""Exception hierarchy. Each class maps onto one CLI exit code."""


class QuasiUError(Exception):
    exit_code = 1


class DataError(QuasiUError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class MissingPairError(DataError):
    """A group pair has no admissible cell but a contrast needs it."""

    def __init__(self, pair, label=None, replicate=None):
        self.pair = pair
        self.replicate = replicate
        name = label or f"{pair[0] + 1}{pair[1] + 1}"
        msg = f"group pair {name} has no admissible (year, subject) cell"
        if replicate is not None:
            msg += f" in replicate {replicate}"
        super().__init__(msg)


class ConfigError(QuasiUError, ValueError):
    exit_code = 3


class DegenerateStatisticError(QuasiUError):
    """Covariance has rank 0 while the contrast vector is nonzero."""

    exit_code = 4
