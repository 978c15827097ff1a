"""slotforge: slot-level knowledge distillation for object-centric video
segmentation, self-contained at desk scale."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateSlotError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    SlotForgeError,
)

__all__ = [
    "ConfigError",
    "DegenerateSlotError",
    "DivergenceError",
    "FormatError",
    "NonFiniteError",
    "SlotForgeError",
    "__version__",
]
