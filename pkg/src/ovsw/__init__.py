"""Binary neural network toolkit: OvSW optimizer, flip tracking, bit-packed inference."""
from __future__ import annotations

__version__ = "0.1.0"
