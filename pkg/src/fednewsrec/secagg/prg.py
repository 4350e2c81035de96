"""Seed expansion into uint64 mask streams.

``mt19937`` seeds a Mersenne Twister with the seed's four little-endian
32-bit words (the classic ``init_by_array`` procedure). It is fast and
reproducible but not cryptographically secure. ``chacha20`` keys ChaCha20
with SHA-256 of the seed and is the secure alternative.
"""

import hashlib
import threading

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from ..errors import ConfigError

_local = threading.local()


def mt19937_stream(seed: bytes, n: int) -> np.ndarray:
    """Entry i is ``w[2i] | w[2i+1] << 32`` over consecutive 32-bit outputs."""
    words = np.frombuffer(seed + b"\0" * (-len(seed) % 4), dtype="<u4")
    bg = getattr(_local, "mt", None)
    if bg is None:
        bg = _local.mt = np.random.MT19937(0)
    bg._legacy_seeding(words)  # init_by_array; what RandomState(words) does
    # pairs of little-endian 32-bit words read as one uint64 give w[2i] | w[2i+1] << 32
    return bg.random_raw(2 * n).astype("<u4").view("<u8").astype(np.uint64, copy=False)


def chacha20_stream(seed: bytes, n: int) -> np.ndarray:
    key = hashlib.sha256(seed).digest()
    enc = Cipher(algorithms.ChaCha20(key, b"\0" * 16), mode=None).encryptor()
    return np.frombuffer(enc.update(b"\0" * (8 * n)), dtype="<u8").astype(np.uint64)


PRGS = {"mt19937": mt19937_stream, "chacha20": chacha20_stream}


def expand(seed: bytes, n: int, prg: str = "mt19937") -> np.ndarray:
    try:
        fn = PRGS[prg]
    except KeyError:
        raise ConfigError(f"unknown prg {prg!r}; choose from {sorted(PRGS)}") from None
    return fn(seed, n)
