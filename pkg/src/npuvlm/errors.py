"""Exception types shared across the package."""


class NpuVlmError(Exception):
    """Base class for all package errors."""


class ShapeError(NpuVlmError, ValueError):
    """Operand shapes are inconsistent with the operator contract."""


class InvalidRangeError(NpuVlmError, ValueError):
    """A calibration range with min > max, or a value outside a representable range."""


class UndefinedSignalError(NpuVlmError, ValueError):
    """A signal-relative metric was asked for on an all-zero reference."""


class AccumulatorOverflowError(NpuVlmError, OverflowError):
    """An integer accumulation left the signed 32-bit range."""


class ContextOverflowError(NpuVlmError, RuntimeError):
    """A decode session ran past ``max_context``.

    ``step`` is the 1-based index of the token that did not fit and
    ``position`` its 0-based sequence position.
    """

    def __init__(self, position: int, max_context: int):
        self.position = position
        self.step = position + 1
        self.max_context = max_context
        super().__init__(
            f"context overflow at step {self.step}: position {position} "
            f"exceeds max_context {max_context}"
        )


class CompletenessError(NpuVlmError, KeyError):
    """A precision plan or range book does not cover a required site."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"no assignment for: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


class ConfigMismatchError(NpuVlmError, ValueError):
    """Two models or artifacts that must share an architecture do not."""


class FormatError(NpuVlmError, ValueError):
    """A serialized artifact is malformed, truncated, or of the wrong version."""
