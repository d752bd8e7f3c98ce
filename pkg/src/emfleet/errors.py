"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class EmfleetError(Exception):
    exit_code = 1


class ConfigError(EmfleetError, ValueError):
    """Invalid generator/CLI configuration."""

    exit_code = 2


class DataShapeError(EmfleetError, ValueError):
    """Malformed telemetry or a dimension mismatch."""

    exit_code = 3


class SampleLookupError(EmfleetError, KeyError):
    exit_code = 4

    def __str__(self):
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class ConstraintError(EmfleetError, ValueError):
    """A population or group is too small for the requested operation."""

    exit_code = 5
