"""Exception hierarchy shared by all fedwrap modules."""


class FedwrapError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FedwrapError):
    """Invalid model spec, wrapper config, or plan."""


class InputError(FedwrapError):
    """Caller passed data violating an operation's precondition."""


class DivergenceError(FedwrapError):
    """Training produced a non-finite loss."""


class DecodeError(FedwrapError):
    """Malformed bytes: bad magic, version mismatch, truncation."""


class IngestionError(FedwrapError):
    """CSV or schema could not be parsed."""


class PartitionError(FedwrapError):
    """A data split could not satisfy its size/class constraints."""


class UnsupportedModelError(FedwrapError):
    """The local model does not expose what the wrapper strategy needs."""


class FederationError(FedwrapError):
    """Aggregation or round coordination failed."""


class RoundTimeoutError(FederationError):
    """Expected client updates did not arrive in time."""

    def __init__(self, message: str, missing: tuple[str, ...] = ()):
        super().__init__(message)
        self.missing = tuple(missing)


class ProtocolError(FedwrapError):
    """A peer violated the wire protocol or sent a bad token."""


class TransportError(FedwrapError):
    """Connection-level failure; the operation may be retried."""


class LifecycleError(FedwrapError):
    """Operation invoked in the wrong wrapper lifecycle phase."""


class EvaluationError(FedwrapError):
    """Metric computation over an invalid prediction setup."""
