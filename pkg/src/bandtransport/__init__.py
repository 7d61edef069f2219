"""Multiband transport of coherence matrices for waves in periodic random media."""

from .errors import BandTransportError

__version__ = "0.1.0"

__all__ = ["BandTransportError", "__version__"]
