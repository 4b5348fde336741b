class ConfigError(ValueError):
    """Invalid configuration, shape, or input file."""


class InvariantViolation(RuntimeError):
    """An internal consistency check failed during simulation."""


class LocalityError(InvariantViolation):
    """A bank-tier unit touched an address outside its own bank."""
