"""Exception hierarchy shared across the package."""


class BlockPropError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "error"


class ConfigError(BlockPropError, ValueError):
    code = "configuration-error"


class InvalidInstanceError(BlockPropError, ValueError):
    code = "invalid-instance"


class InvalidTrajectoryError(BlockPropError, ValueError):
    code = "invalid-trajectory"


class DomainError(BlockPropError, ValueError):
    code = "domain-error"


class StabilityError(BlockPropError, ValueError):
    """Raised when mu * gamma reaches 1 and the queue has no steady state."""

    code = "stability-error"


class NoInteractionError(BlockPropError, ValueError):
    code = "no-interaction"


class DegenerateWeightsError(BlockPropError, ValueError):
    code = "degenerate-weights"


class NoRecommendationError(BlockPropError, ValueError):
    code = "no-recommendation"


class FusionSingularityError(BlockPropError, ValueError):
    code = "fusion-singularity"


class InfeasibleError(BlockPropError, RuntimeError):
    """Too few eligible miners left to complete a trajectory."""

    code = "infeasible"


class TrainingDivergedError(BlockPropError, RuntimeError):
    code = "training-diverged"


class CheckpointError(BlockPropError, RuntimeError):
    code = "checkpoint-error"
