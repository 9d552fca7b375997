"""Exception hierarchy shared by all pipeline stages.

The CLI maps :class:`ConfigError` to exit code 2 and everything else to 1.
"""


class A3DSegError(Exception):
    """Base class; ``module`` names the pipeline stage that failed."""

    module = "a3dseg"


class ConfigError(A3DSegError, ValueError):
    module = "config"


class ContractError(A3DSegError, ValueError):
    """A function was called with inputs violating its contract (shapes, ranges)."""

    module = "contract"


class DatasetError(A3DSegError):
    module = "dataset"


class CheckpointError(A3DSegError):
    module = "checkpoint"


class MetricError(A3DSegError):
    module = "metrics"


class TrainingError(A3DSegError):
    module = "training"
