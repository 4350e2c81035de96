"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-range input to a model or data operation."""


class ConfigError(ValueError):
    """Invalid run or protocol configuration."""


class ProtocolError(RuntimeError):
    """A federated or secure-aggregation protocol invariant was violated."""


class SecAggAborted(ProtocolError):
    """The secure aggregation session could not complete; nothing is released."""


class RoundRejected(RuntimeError):
    """A round produced an unusable update and left the state unchanged."""
