"""Exception types shared across the package."""


class SlotForgeError(Exception):
    """Base class for all package-specific errors."""


class NonFiniteError(SlotForgeError):
    """A forward op produced NaN or Inf; surfaced instead of propagated."""


class DegenerateSlotError(SlotForgeError):
    """A slot (or other vector fed to a cosine) has norm below 1e-12."""


class FormatError(SlotForgeError):
    """A binary file failed magic/version/shape validation."""


class ConfigError(SlotForgeError):
    """A config file or flag combination is invalid."""


class DivergenceError(SlotForgeError):
    """Training hit NaN/Inf; carries the run record up to the failing step."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record
