"""Exception hierarchy shared across the package."""


class ChromagenError(Exception):
    """Base class for all package errors."""


class MalformedInputError(ChromagenError, ValueError):
    pass


class DomainError(ChromagenError, ValueError):
    """A value lies outside the range an operation is defined on."""


class ShapeError(ChromagenError, ValueError):
    pass


class NonFiniteError(ChromagenError, FloatingPointError):
    pass


class NonFiniteLossError(NonFiniteError):
    """Raised by training when a loss component stops being finite."""

    def __init__(self, epoch: int, step: int, component: str, value: float):
        self.epoch = epoch
        self.step = step
        self.component = component
        self.value = value
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}: {component} = {value}"
        )


class CapabilityError(ChromagenError, RuntimeError):
    """The numerical backend lacks a feature the models require."""


class NotPSDError(ChromagenError, ValueError):
    pass


class ExtractorError(ChromagenError, RuntimeError):
    pass


class CheckpointError(ChromagenError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class MetricLogError(ChromagenError):
    pass
