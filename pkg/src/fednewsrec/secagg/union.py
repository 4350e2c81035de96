"""Private union of item sets through additive indicator vectors.

Each client marks its items with independent uniform nonzero residues of
Z_{2^64} and zeros elsewhere; the modular sum is nonzero exactly on the
union, except with probability about 2^-64 per item held by several clients.
"""

import numpy as np


def encode_union(local_items, corpus_size: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    idx = np.fromiter(sorted(set(int(i) for i in local_items)), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= corpus_size):
        raise IndexError("item index outside corpus")
    h = np.zeros(corpus_size, dtype=np.uint64)
    h[idx] = rng.integers(1, 2**64, size=idx.size, dtype=np.uint64)
    return h


def decode_union(summed) -> set[int]:
    return set(np.flatnonzero(np.asarray(summed, dtype=np.uint64)).tolist())
