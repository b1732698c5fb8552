"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class ParameterError(ValueError):
    """A configuration or hyperparameter value is invalid."""


class PropagationError(ArithmeticError):
    """Moment propagation produced a non-finite value."""


class UsageError(RuntimeError):
    """An API was called in an invalid state."""


class NumericalFailure(ArithmeticError):
    """Training produced a non-finite loss.

    Carries enough context (epoch, batch, offending output node) to write a
    diagnostics file.
    """

    def __init__(self, message, epoch=None, batch=None, node=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.node = node

    def diagnostics(self):
        return {
            "error": str(self),
            "epoch": self.epoch,
            "batch": self.batch,
            "node": self.node,
        }


class ArtifactMismatch(ValueError):
    """A checkpoint does not match the architecture it is loaded into."""
