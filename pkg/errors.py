"""
Exception hierarchy for the hitter workbench.

Every error raised on purpose derives from HitterError so the command line
can report it and exit nonzero. Out-of-range ids raise the builtin IndexError.
"""


class HitterError(Exception):
    """Base class for all workbench errors."""


class DimensionError(HitterError):
    """Operand shapes do not agree."""


class ContractError(HitterError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(HitterError):
    """A forward operation produced NaN or Inf."""


class ConfigError(HitterError):
    """Invalid or unknown configuration value."""


class ParseError(HitterError):
    """Malformed line in a triple file."""

    def __init__(self, path, line_number, message):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class VocabError(HitterError):
    """Unknown symbol while the vocabulary is frozen."""


class CheckpointError(HitterError):
    """Checkpoint file is truncated, has the wrong version, or mismatches the config."""

    def __init__(self, message, tensor_name=None):
        self.tensor_name = tensor_name
        super().__init__(message)


class TrainingError(HitterError):
    """Training could not run or was aborted."""
