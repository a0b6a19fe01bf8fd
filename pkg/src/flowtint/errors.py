"""Exception hierarchy shared by every flowtint module.

Each class carries the CLI exit code it maps to so the command layer can
translate failures without a lookup table of its own.
"""


class FlowtintError(Exception):
    exit_code = 3


class UsageError(FlowtintError):
    exit_code = 2


class ConfigurationError(UsageError):
    pass


class DataError(FlowtintError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class DomainError(DataError, ValueError):
    pass


class LayoutError(DataError):
    pass


class PresetError(DataError):
    pass


class SizingError(DataError):
    pass


class SplitError(DataError):
    pass


class EmptyManifestError(DataError):
    pass


class GroupSizeError(DataError):
    pass


class StageOrderError(FlowtintError):
    exit_code = 3


class MissingAnchorsError(DataError):
    pass


class NumericError(FlowtintError, ArithmeticError):
    """Non-finite value inside a numeric routine.

    ``step`` is the sampler step index (when raised from the ODE loop) and
    ``context`` holds any extra identifiers such as a sample id or time.
    """

    exit_code = 4

    def __init__(self, message, step=None, **context):
        super().__init__(message)
        self.step = step
        self.context = context


class ScoringError(FlowtintError):
    exit_code = 5

    def __init__(self, message, member=None, attempts=None):
        super().__init__(message)
        self.member = member
        self.attempts = attempts


class ProtocolError(ScoringError):
    def __init__(self, message, payload=None, member=None):
        super().__init__(message, member=member)
        self.payload = payload
