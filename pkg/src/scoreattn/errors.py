"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """A value lies outside an operation's mathematical domain."""


class DegenerateInputError(ValueError):
    """An input leaves nothing to compute over (e.g. a fully masked slice)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class NumericalError(ArithmeticError):
    """Training diverged (a non-finite loss or gradient)."""
