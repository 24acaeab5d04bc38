"""Exception types shared across the laboratory."""


class InputError(ValueError):
    """Rejected input: wrong shape, domain, or inconsistent arguments."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where a finite one is required."""


class CapacityError(RuntimeError):
    """Dense-mode request exceeds the configured dense parameter limit."""


class FormatError(InputError):
    """Malformed binary or container file. Carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(NumericError):
    """Optimizer produced a non-finite update. Carries the last finite state."""

    def __init__(self, message, last_theta=None, iteration=None):
        super().__init__(message)
        self.last_theta = last_theta
        self.iteration = iteration


class DegenerateGapError(ValueError):
    """Zero eigengap makes the perturbation bound undefined."""
