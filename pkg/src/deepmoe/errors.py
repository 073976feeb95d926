"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """A forward computation produced NaN or Inf from finite inputs."""


class ContractError(ValueError):
    """A documented invariant was violated by the caller (e.g. negative gates)."""


class ConfigError(ValueError):
    """A model or training configuration is invalid."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""
