"""Fixed-point encoding of real vectors into Z_{2^64}.

Values are scaled by ``2**frac_bits``, rounded to the nearest integer and
stored as two's-complement uint64, so modular addition of encodings equals
the encoding of the sum as long as the true sum stays inside the signed
63-bit range.
"""

import numpy as np

from ..errors import ProtocolError

MODULUS_BITS = 64


def quantize(x, frac_bits: int = 24) -> np.ndarray:
    if not 0 <= frac_bits < 63:
        raise ProtocolError(f"frac_bits must be in [0, 63), got {frac_bits}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ProtocolError("cannot quantize non-finite values")
    # keep headroom so sums of many encodings do not wrap
    limit = 2.0 ** (62 - frac_bits)
    if x.size and np.max(np.abs(x)) >= limit:
        raise ProtocolError(f"magnitude {np.max(np.abs(x))} exceeds fixed-point range {limit}")
    return np.rint(x * 2.0**frac_bits).astype(np.int64).view(np.uint64)


def dequantize(q, frac_bits: int = 24) -> np.ndarray:
    q = np.asarray(q, dtype=np.uint64)
    return q.view(np.int64).astype(np.float64) / 2.0**frac_bits
