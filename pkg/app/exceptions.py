"""
Error hierarchy shared by the pipeline services and the CLI.

Every error carries the exit code the CLI returns when it escapes a subcommand.
"""


class UniconError(Exception):
    exit_code = 1


class ConfigError(UniconError):
    """Invalid pipeline config or flags. The message names the field path."""

    exit_code = 2


class MissingArtifactError(UniconError):
    exit_code = 3

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"{artifact} missing; run {producer}")


class NumericError(UniconError):
    exit_code = 4


class TrainingDivergedError(NumericError):
    pass


class FormatError(UniconError):
    """Input file could not be parsed (as opposed to parsed but invalid)."""


class CheckpointError(FormatError):
    pass


class DataError(UniconError, ValueError):
    """Precondition violation of a pipeline operation."""


class UntrainedModelError(DataError):
    pass
