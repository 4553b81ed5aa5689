"""Exception hierarchy. The CLI maps every ``InstrsegError`` to exit code 1."""


class InstrsegError(Exception):
    pass


class ShapeError(InstrsegError, ValueError):
    pass


class LabelCodeError(InstrsegError, ValueError):
    pass


class LayoutError(InstrsegError):
    pass


class MissingMaskError(LayoutError):
    pass


class MissingPredictionError(LayoutError):
    pass


class ConfigError(InstrsegError, ValueError):
    pass


class CheckpointError(InstrsegError):
    pass


class DivergenceError(InstrsegError, FloatingPointError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class OutOfMemoryError(InstrsegError, MemoryError):
    pass
