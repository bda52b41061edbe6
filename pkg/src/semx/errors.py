"""Exception types shared across the package."""


class SemxError(Exception):
    pass


class ConfigError(SemxError, ValueError):
    pass


class SchemaError(SemxError, ValueError):
    pass


class ParseError(SemxError, ValueError):
    pass


class SamplingError(SemxError, ValueError):
    def __init__(self, message, track_ids=()):
        super().__init__(message)
        self.track_ids = list(track_ids)


class ShapeError(SemxError, ValueError):
    pass


class StateError(SemxError, RuntimeError):
    pass


class TrainingError(SemxError, RuntimeError):
    pass
