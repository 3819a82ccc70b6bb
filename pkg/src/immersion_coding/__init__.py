"""Immersion-based coding: run dynamic algorithms on randomly encoded data.

The user lifts inputs, states and utilities into higher dimensions with
random full-rank maps and kernel-aligned Laplace noise; the cloud runs a
matrix-conjugated target algorithm on the encoded data and the user decodes
the exact utility.
"""

from .errors import (ConfigError, ImmersionError, NumericError, ProtocolError)
from .scheme import (EncodingScheme, SchemeDims, SchemeScales, decode_input, decode_utility,
                     encode_input, encode_utility, keygen, keygen_preset, load_scheme,
                     save_scheme)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "EncodingScheme", "ImmersionError", "NumericError", "ProtocolError",
    "SchemeDims", "SchemeScales", "decode_input", "decode_utility", "encode_input",
    "encode_utility", "keygen", "keygen_preset", "load_scheme", "save_scheme",
]
