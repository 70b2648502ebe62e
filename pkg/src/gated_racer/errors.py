"""Exception types shared across the package."""


class GatedRacerError(Exception):
    pass


class ConfigError(GatedRacerError, ValueError):
    pass


class InvalidStateError(GatedRacerError, ValueError):
    pass


class OutOfMapError(GatedRacerError):
    pass


class EpisodeTerminatedError(GatedRacerError, RuntimeError):
    pass


class ExpertCrashError(GatedRacerError, RuntimeError):
    pass


class CheckpointError(GatedRacerError, ValueError):
    pass


class TrackGenerationError(GatedRacerError, RuntimeError):
    pass


class TrainingError(GatedRacerError, RuntimeError):
    pass
