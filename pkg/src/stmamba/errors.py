"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ShapeError(ValueError):
    """Tensor extents do not line up."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class SequencingError(LookupError):
    """A time window references a slot that is not available."""

    def __init__(self, slot: int, message: str | None = None):
        self.slot = slot
        super().__init__(message or f"missing flow image for slot {slot}")


class FormatError(ValueError):
    """A file on disk is malformed, truncated or of an unsupported version."""
