"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violates an operation's precondition."""


class OutOfBounds(ValueError):
    """A pixel lies outside the image."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class ConfigError(ValueError):
    """A rig, sampling or training configuration is invalid."""


class FormatError(ValueError):
    """A dataset, checkpoint or mesh file cannot be parsed."""


class EmptyFieldError(ValueError):
    """The scalar field has no zero crossing inside the extraction bound."""
