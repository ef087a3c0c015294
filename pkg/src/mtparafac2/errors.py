"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class Parafac2Error(Exception):
    exit_code = 1


class ConfigError(Parafac2Error, ValueError):
    exit_code = 2


class DataError(Parafac2Error, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class ShapeError(DataError):
    pass


class UniquenessError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class InsufficientHistory(Parafac2Error):
    """Raised when fewer than two epochs of losses are recorded."""


class DivergenceError(Parafac2Error, FloatingPointError):
    exit_code = 4

    def __init__(self, message, epoch=None, step=None, state=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.state = state
