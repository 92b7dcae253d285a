"""Secure federated learning and encrypted inference on a fixed-point ring."""

__version__ = "0.1.0"

from .errors import (DegenerateInputError, FrameError, MaterialExhausted, ProtocolError, TransportError,
                     VersionMismatch)
from .ring import FixedTensor, decode_fixed, encode_fixed

__all__ = ["DegenerateInputError", "FixedTensor", "FrameError", "MaterialExhausted", "ProtocolError",
           "TransportError", "VersionMismatch", "__version__", "decode_fixed", "encode_fixed"]
