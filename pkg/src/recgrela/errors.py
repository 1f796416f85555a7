"""Exception hierarchy shared across the package.

Every error carries a stable kebab-case ``error_class`` so the CLI can emit
one machine-parseable line per failure.
"""


class EngineError(Exception):
    error_class = "internal-error"


class DimensionError(EngineError):
    """Tensor shapes incompatible with the requested operation."""

    error_class = "dimension-mismatch"


class ContractError(EngineError):
    """A documented precondition was violated by the caller."""

    error_class = "contract-violation"


class BoundsError(EngineError):
    """An index or position fell outside its valid range."""

    error_class = "out-of-bounds"


class NumericError(EngineError):
    """A computation produced or encountered non-finite values."""

    error_class = "numeric-failure"


class ResourceError(EngineError):
    """A guard against excessive memory/compute was exceeded."""

    error_class = "resource-limit"


class FormatError(EngineError):
    """Malformed or unusable input file contents."""

    error_class = "format-error"


class EmptyDatasetError(EngineError):
    """Filtering removed every user from the dataset."""

    error_class = "empty-dataset"


class ConfigError(EngineError):
    """Invalid run configuration; ``problems`` lists every violation."""

    error_class = "config-invalid"

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CheckpointNotFoundError(EngineError):
    error_class = "checkpoint-not-found"


class CheckpointFormatError(EngineError):
    error_class = "checkpoint-format"


class DivergenceError(EngineError):
    """Training loss became non-finite; best parameters were retained."""

    error_class = "training-diverged"

    def __init__(self, message, history=None):
        self.history = history or []
        super().__init__(message)
