"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or ranks of operands do not match the operation's contract."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of the operation."""


class UsageError(ValueError):
    """The API was called in a way the contract forbids (e.g. ambiguous broadcast)."""


class FormatError(ValueError):
    """A serialized container is malformed; message names the byte offset."""


class ConfigError(ValueError):
    """An inconsistent model or run configuration."""


class VocabularyError(ValueError):
    """A token id or token string outside the vocabulary."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
