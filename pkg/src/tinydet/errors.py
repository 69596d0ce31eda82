"""Exception types shared across the package."""


class TinyDetError(Exception):
    """Base class for all package errors."""


class ShapeError(TinyDetError, ValueError):
    """Array or layer geometry does not line up."""


class ConfigError(TinyDetError, ValueError):
    """Malformed network graph text.

    Carries the 1-based line number and the layer index (net section excluded)
    when they are known.
    """

    def __init__(self, message, line=None, layer=None):
        self.line = line
        self.layer = layer
        where = []
        if line is not None:
            where.append(f"line {line}")
        if layer is not None:
            where.append(f"layer {layer}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class WeightsError(TinyDetError, ValueError):
    """Binary weights blob does not match the network graph."""


class StateError(TinyDetError, RuntimeError):
    """A backward pass was requested without a cached forward pass."""


class DataError(TinyDetError, ValueError):
    """Bad annotation, image or dataset layout."""


class EvaluationError(TinyDetError, ValueError):
    """Metrics are undefined for the given inputs."""


class TrainingError(TinyDetError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)
