"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names both shapes."""


class ConfigError(ValueError):
    """A structural configuration is invalid (divisibility, ranges, keys)."""


class ContractError(ValueError):
    """A runtime precondition was violated (non-scalar loss, bad weights...)."""


class LoadError(IOError):
    """A serialized artifact is unreadable: bad magic, version, hash, or truncation."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; the last good state was preserved."""
