"""Exception types shared across the package."""


class EncDecError(Exception):
    """Base class for all package errors."""


class ShapeError(EncDecError):
    pass


class TapeError(EncDecError):
    pass


class ContractError(EncDecError):
    """An operation was called outside its documented preconditions."""


class ConfigError(EncDecError):
    pass


class InputError(EncDecError):
    pass


class SurgeryError(EncDecError):
    pass


class FormatError(EncDecError):
    """A file does not follow the expected binary layout."""


class ValidationError(EncDecError):
    """A well-formed file holds tensors that disagree with its configs."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class NonFiniteLossError(EncDecError):
    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (lr={lr:.3g}, grad_norm={grad_norm:.3g})"
        )
