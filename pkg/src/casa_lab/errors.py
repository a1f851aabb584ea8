"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class ConfigError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class OversizeError(ValueError):
    pass
