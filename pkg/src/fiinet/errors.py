"""Exception hierarchy shared across the package.

Every error carries a short machine-parsable ``category`` so the CLI can
emit a single structured line and a stable exit code.
"""


class FiinetError(Exception):
    category = "internal"


class ConfigError(FiinetError):
    category = "config"


class DataError(FiinetError):
    category = "data"


class ShapeError(FiinetError):
    category = "shape"


class NonFiniteError(FiinetError):
    category = "numeric"


class CheckpointError(FiinetError):
    category = "checkpoint"


class MetricError(FiinetError):
    category = "metric"


class TrainingDivergedError(FiinetError):
    category = "diverged"
