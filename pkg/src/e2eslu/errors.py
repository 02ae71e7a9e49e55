"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front-end can map
failures onto its categorized exit statuses (1 usage, 2 data, 3 numeric).
"""


class SluError(Exception):
    exit_code = 2


class UsageError(SluError):
    exit_code = 1


class ConfigError(SluError):
    """Invalid configuration (missing star unit, bad decode setup, ...)."""


class DecodeConfigError(ConfigError):
    pass


class DataError(SluError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class SpecError(DataError):
    pass


class InventoryMismatchError(DataError):
    pass


class MalformedChunkError(DataError):
    pass


class MalformedBioError(DataError):
    pass


class EncodingError(DataError):
    def __init__(self, char, position=None):
        self.char = char
        self.position = position
        super().__init__(f"character {char!r} (U+{ord(char):04X}) at position {position} "
                         "is not in the vocabulary")


class TransferMismatchError(DataError):
    pass


class StateError(SluError):
    pass


class ShapeError(SluError):
    pass


class NumericError(SluError):
    exit_code = 3


class InfeasibleTargetError(NumericError):
    """Target cannot be produced within the available frames."""

    def __init__(self, n_frames, required):
        self.n_frames = n_frames
        self.required = required
        super().__init__(f"target needs at least {required} frames, got {n_frames}")


class DivergenceError(NumericError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class OracleTooLargeError(SluError):
    pass
