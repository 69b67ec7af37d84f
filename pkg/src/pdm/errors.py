"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its documented contract."""


class DegenerateInputError(ValueError):
    """Input is well-formed but mathematically degenerate (e.g. a zero-norm vector)."""


class UnsupportedConfiguration(ValueError):
    """A configuration the implementation deliberately does not support."""


class NumericFailure(ArithmeticError):
    """A non-finite value appeared; ``component`` names where."""

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"non-finite value in {component}")
