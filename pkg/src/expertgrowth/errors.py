class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class EpisodeError(RuntimeError):
    """An episode had to be aborted (e.g. the controller emitted a non-finite action)."""


class RoutingError(RuntimeError):
    """A routing decision named a cluster that has no expert attached."""


class TrainingError(RuntimeError):
    """Optimisation diverged (non-finite loss)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, path, message: str):
        super().__init__(f"stage {stage!r} failed ({path}): {message}")
        self.stage = stage
        self.path = path
