"""Shamir secret sharing of byte strings over GF(p), p = 2^130 - 5.

A secret is split into 16-byte little-endian blocks; each block is shared
with an independent random polynomial of degree ``t - 1``. Every block fits
below ``p``, so one 16-byte seed is one field element.
"""

from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass

from ..errors import ProtocolError

PRIME = 2**130 - 5
BLOCK = 16
_ELEM = 17  # bytes per serialized field element


@dataclass(frozen=True)
class SecretShare:
    owner: int
    holder: int
    index: int
    values: tuple[int, ...]
    length: int
    threshold: int

    def to_bytes(self) -> bytes:
        head = struct.pack("<IIIHH", self.owner, self.holder, self.index, self.length, self.threshold)
        return head + b"".join(v.to_bytes(_ELEM, "little") for v in self.values)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SecretShare":
        owner, holder, index, length, threshold = struct.unpack_from("<IIIHH", data)
        body = data[16:]
        if len(body) % _ELEM:
            raise ProtocolError("truncated share")
        values = tuple(
            int.from_bytes(body[i : i + _ELEM], "little") for i in range(0, len(body), _ELEM)
        )
        return cls(owner, holder, index, values, length, threshold)


def _blocks(secret: bytes) -> list[int]:
    padded = secret + b"\0" * (-len(secret) % BLOCK)
    return [int.from_bytes(padded[i : i + BLOCK], "little") for i in range(0, len(padded), BLOCK)] or [0]


def _eval(coeffs: list[int], x: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % PRIME
    return acc


def make_shares(
    secret: bytes,
    t: int,
    n: int | None = None,
    *,
    indices=None,
    owner: int = 0,
    holders=None,
    rng=None,
) -> list[SecretShare]:
    """Split ``secret`` so that any ``t`` of the returned shares recover it.

    Shares are evaluated at ``indices`` (default ``1..n``); ``holders`` names
    who receives each one (defaults to the index). ``rng`` needs a
    ``randrange`` method and defaults to the OS CSPRNG.
    """
    if indices is None:
        if n is None:
            raise ValueError("give n or indices")
        indices = range(1, n + 1)
    indices = list(indices)
    n = len(indices)
    if not 1 <= t <= n:
        raise ProtocolError(f"need 1 <= t <= n, got t={t}, n={n}")
    if len(set(indices)) != n or any(not 0 < x < PRIME for x in indices):
        raise ProtocolError("share indices must be distinct nonzero field elements")
    holders = list(holders) if holders is not None else indices
    draw = rng.randrange if rng is not None else secrets.randbelow
    polys = []
    for block in _blocks(secret):
        polys.append([block] + [draw(PRIME) for _ in range(t - 1)])
    return [
        SecretShare(owner, h, x, tuple(_eval(c, x) for c in polys), len(secret), t)
        for x, h in zip(indices, holders)
    ]


def lagrange_at_zero(xs: list[int]) -> list[int]:
    coeffs = []
    for j, xj in enumerate(xs):
        num, den = 1, 1
        for m, xm in enumerate(xs):
            if m != j:
                num = num * xm % PRIME
                den = den * (xm - xj) % PRIME
        coeffs.append(num * pow(den, -1, PRIME) % PRIME)
    return coeffs


def reconstruct(shares, t: int | None = None, _coeff_cache: dict | None = None) -> bytes:
    """Recover the secret from at least ``t`` shares of one polynomial."""
    shares = list(shares)
    if not shares:
        raise ProtocolError("no shares to reconstruct from")
    t = t or shares[0].threshold
    uniq = {s.index: s for s in shares}
    if len(uniq) < t:
        raise ProtocolError(f"need {t} shares, have {len(uniq)}")
    chosen = [uniq[x] for x in sorted(uniq)[:t]]
    length = chosen[0].length
    nblocks = len(chosen[0].values)
    if any(s.length != length or len(s.values) != nblocks for s in chosen):
        raise ProtocolError("shares come from different secrets")
    xs = tuple(s.index for s in chosen)
    if _coeff_cache is not None and xs in _coeff_cache:
        lam = _coeff_cache[xs]
    else:
        lam = lagrange_at_zero(list(xs))
        if _coeff_cache is not None:
            _coeff_cache[xs] = lam
    out = bytearray()
    for b in range(nblocks):
        val = sum(l * s.values[b] for l, s in zip(lam, chosen)) % PRIME
        if val >= 1 << (8 * BLOCK):
            raise ProtocolError("inconsistent shares")
        out += val.to_bytes(BLOCK, "little")
    return bytes(out[:length])
