"""Secure aggregation: fixed-point encoding, Shamir sharing, masking protocol
and private union of item sets."""

from .fixedpoint import dequantize, quantize
from .protocol import SecAggClient, SecAggConfig, SecAggResult, SecAggServer, secure_sum
from .shamir import SecretShare, make_shares, reconstruct
from .union import decode_union, encode_union

__all__ = [
    "SecAggClient",
    "SecAggConfig",
    "SecAggResult",
    "SecAggServer",
    "SecretShare",
    "decode_union",
    "dequantize",
    "encode_union",
    "make_shares",
    "quantize",
    "reconstruct",
    "secure_sum",
]
