"""Exception hierarchy shared across the package; the CLI maps these to exit codes."""


class RejectedInputError(ValueError):
    """Input data or arrays violate an operation's preconditions."""


class SchemaError(RejectedInputError):
    """A required CSV column is missing."""


class EmptyDatasetError(RejectedInputError):
    """No usable samples could be produced."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient."""
