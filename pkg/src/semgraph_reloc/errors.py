"""Exception hierarchy shared by all modules.

Each class carries a ``category`` string that the CLI prints as a
machine-parseable prefix and maps onto an exit status.
"""


class ArtifactError(Exception):
    category = "runtime"
    exit_code = 1


class ParseError(ArtifactError, ValueError):
    category = "parse"
    exit_code = 4


class ConfigError(ArtifactError, ValueError):
    category = "config"
    exit_code = 3


class DegenerateInputError(ArtifactError, ValueError):
    """The input is structurally valid but too small for the operation."""

    category = "degenerate-input"
    exit_code = 5


class GenerationError(ArtifactError, RuntimeError):
    category = "generation"
    exit_code = 5


class TrainingError(ArtifactError, RuntimeError):
    category = "training"
    exit_code = 6


class CheckpointError(ArtifactError, ValueError):
    category = "checkpoint"
    exit_code = 7
