"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """An argument lies outside its admissible range."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class VocabularyError(KeyError):
    """A text token id is not part of the model vocabulary."""


class ConfigError(ValueError):
    """Configuration is inconsistent with the data or the model."""
