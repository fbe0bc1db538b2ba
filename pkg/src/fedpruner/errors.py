"""Exception hierarchy shared by every module."""


class FedPrunerError(Exception):
    """Base class for all errors raised by this package."""


# linear algebra
class NotSquare(FedPrunerError, ValueError):
    pass


class NotSymmetric(FedPrunerError, ValueError):
    pass


class KTooLarge(FedPrunerError, ValueError):
    pass


# similarity
class RowMismatch(FedPrunerError, ValueError):
    pass


class TooFewSamples(FedPrunerError, ValueError):
    pass


class DegenerateActivations(FedPrunerError, ValueError):
    """A unit produced (near) constant activations, so its self-HSIC vanishes."""

    def __init__(self, message: str, unit: int | None = None):
        super().__init__(message)
        self.unit = unit


# pruning
class InsufficientSpectrum(FedPrunerError, ValueError):
    pass


class KeepTooLarge(FedPrunerError, ValueError):
    pass


# model
class InvalidConfig(FedPrunerError, ValueError):
    pass


class PlanUnitOutOfRange(FedPrunerError, ValueError):
    pass


class DuplicateUnit(FedPrunerError, ValueError):
    pass


class EmptyShard(FedPrunerError, ValueError):
    pass


# aggregation
class EmptyList(FedPrunerError, ValueError):
    pass


class ShapeMismatch(FedPrunerError, ValueError):
    pass


# federation
class DeviceExcluded(FedPrunerError):
    """The device cannot afford even a one-unit submodel."""


class NoEligibleDevices(FedPrunerError):
    pass


class ConfigError(FedPrunerError, ValueError):
    """Configuration document failed schema validation."""


class CheckpointError(FedPrunerError, ValueError):
    pass
