"""Exception types raised across the package."""


class CPSFError(Exception):
    """Base class for all errors raised by cpsf."""


class InvalidInputError(CPSFError, ValueError):
    """A state, input or argument is non-finite or out of range."""


class ShapeError(CPSFError, ValueError):
    """Array shapes do not match the declared topology."""


class ScenarioInfeasibleError(CPSFError):
    """Rejection sampling gave up before finding a valid scenario."""


class EpisodeAbortedError(CPSFError):
    """A controller produced a non-finite command during a rollout."""


class TrainingDivergenceError(CPSFError):
    """A loss or gradient became non-finite during training."""


class MissingArtifactError(CPSFError):
    """A required model/radii/dataset file has not been produced yet."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}; run the `{producer}` subcommand first"
        )

