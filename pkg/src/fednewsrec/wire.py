"""Binary message formats exchanged between server and clients.

Every frame is ``header || payload`` with the little-endian header::

    u16 tag | u32 sender | u32 receiver | u32 payload_length

Payload layouts are documented on each message class. Vectors are raw
little-endian arrays (float64 or uint64) with no per-element framing, so a
400-entry float vector costs exactly 3200 payload bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .errors import ProtocolError

HEADER = struct.Struct("<HIII")
HEADER_SIZE = HEADER.size

_REGISTRY: dict[int, type] = {}


def message(cls):
    _REGISTRY[cls.TAG] = cls
    return cls


def encode_frame(sender: int, receiver: int, msg) -> bytes:
    payload = msg.to_bytes()
    return HEADER.pack(msg.TAG, sender, receiver, len(payload)) + payload


def decode_frame(frame: bytes):
    tag, sender, receiver, length = HEADER.unpack_from(frame)
    payload = frame[HEADER_SIZE:]
    if len(payload) != length:
        raise ProtocolError(f"frame length mismatch: header {length}, got {len(payload)}")
    try:
        cls = _REGISTRY[tag]
    except KeyError:
        raise ProtocolError(f"unknown message tag {tag}") from None
    return sender, receiver, cls.from_bytes(payload)


def _f64(vec) -> bytes:
    return np.ascontiguousarray(vec, dtype="<f8").tobytes()


def _u64(vec) -> bytes:
    return np.ascontiguousarray(vec, dtype="<u8").tobytes()


# ---------------------------------------------------------------------------
# model distribution and plaintext uploads


@message
@dataclass
class Empty:
    """Zero-length payload; used for pings and accounting checks."""

    TAG: ClassVar[int] = 0

    def to_bytes(self) -> bytes:
        return b""

    @classmethod
    def from_bytes(cls, data: bytes):
        return cls()


@dataclass
class _Vector:
    values: np.ndarray

    def to_bytes(self) -> bytes:
        return _f64(self.values)

    @classmethod
    def from_bytes(cls, data: bytes):
        return cls(np.frombuffer(data, dtype="<f8").astype(np.float64))


@message
@dataclass
class ModelBroadcast(_Vector):
    """Flat user-model parameters. Payload: float64[n]."""

    TAG: ClassVar[int] = 10


@message
@dataclass
class EncoderBroadcast(_Vector):
    """Flat news-encoder parameters (whole-model baseline only). Payload: float64[n]."""

    TAG: ClassVar[int] = 12


@message
@dataclass
class PlainUpload(_Vector):
    """Weighted gradient vector sent without masking. Payload: float64[n]."""

    TAG: ClassVar[int] = 13


@message
@dataclass
class ReprBroadcast:
    """Representations of the union item set.

    Payload: u32 n | u32 d | u32 item_index[n] | float64 matrix[n*d]
    """

    TAG: ClassVar[int] = 11
    item_index: np.ndarray
    matrix: np.ndarray

    def to_bytes(self) -> bytes:
        n, d = self.matrix.shape
        return (
            struct.pack("<II", n, d)
            + np.ascontiguousarray(self.item_index, dtype="<u4").tobytes()
            + _f64(self.matrix)
        )

    @classmethod
    def from_bytes(cls, data: bytes):
        n, d = struct.unpack_from("<II", data)
        idx = np.frombuffer(data, dtype="<u4", count=n, offset=8).astype(np.int64)
        mat = np.frombuffer(data, dtype="<f8", count=n * d, offset=8 + 4 * n).reshape(n, d)
        return cls(idx, mat.astype(np.float64))


@message
@dataclass
class ItemSetUpload:
    """Plaintext local item set (insecure union path). Payload: u32 item_index[n]."""

    TAG: ClassVar[int] = 14
    item_index: np.ndarray

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.item_index, dtype="<u4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes):
        return cls(np.frombuffer(data, dtype="<u4").astype(np.int64))


# ---------------------------------------------------------------------------
# secure aggregation


@message
@dataclass
class KeyAdvert:
    """Payload: u32 owner | sign_pk[32] | s_pk[32] | c_pk[32] | signature[64]"""

    TAG: ClassVar[int] = 1
    owner: int
    sign_pk: bytes
    s_pk: bytes
    c_pk: bytes
    signature: bytes

    SIZE: ClassVar[int] = 4 + 32 * 3 + 64

    def to_bytes(self) -> bytes:
        out = struct.pack("<I", self.owner) + self.sign_pk + self.s_pk + self.c_pk + self.signature
        if len(out) != self.SIZE:
            raise ProtocolError("malformed key advertisement")
        return out

    @classmethod
    def from_bytes(cls, data: bytes):
        (owner,) = struct.unpack_from("<I", data)
        return cls(owner, data[4:36], data[36:68], data[68:100], data[100:164])


@message
@dataclass
class KeyList:
    """Server broadcast of all advertisements. Payload: u32 n | KeyAdvert[n]"""

    TAG: ClassVar[int] = 2
    adverts: list

    def to_bytes(self) -> bytes:
        return struct.pack("<I", len(self.adverts)) + b"".join(a.to_bytes() for a in self.adverts)

    @classmethod
    def from_bytes(cls, data: bytes):
        (n,) = struct.unpack_from("<I", data)
        size = KeyAdvert.SIZE
        return cls([KeyAdvert.from_bytes(data[4 + i * size : 4 + (i + 1) * size]) for i in range(n)])


@dataclass
class ShareDeliver:
    """One encrypted share. Layout: u32 owner | u32 holder | u32 len | ciphertext"""

    owner: int
    holder: int
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<III", self.owner, self.holder, len(self.ciphertext)) + self.ciphertext


@message
@dataclass
class ShareBundle:
    """Encrypted shares, client->server (one owner) or server->client (one
    holder). Payload: u32 n | ShareDeliver[n]"""

    TAG: ClassVar[int] = 3
    shares: list

    def to_bytes(self) -> bytes:
        return struct.pack("<I", len(self.shares)) + b"".join(s.to_bytes() for s in self.shares)

    @classmethod
    def from_bytes(cls, data: bytes):
        (n,) = struct.unpack_from("<I", data)
        pos, out = 4, []
        for _ in range(n):
            owner, holder, length = struct.unpack_from("<III", data, pos)
            pos += 12
            out.append(ShareDeliver(owner, holder, bytes(data[pos : pos + length])))
            pos += length
        return cls(out)


@message
@dataclass
class MaskedInput:
    """Payload: u32 owner | uint64 entries[n]"""

    TAG: ClassVar[int] = 5
    owner: int
    vector: np.ndarray

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.owner) + _u64(self.vector)

    @classmethod
    def from_bytes(cls, data: bytes):
        (owner,) = struct.unpack_from("<I", data)
        return cls(owner, np.frombuffer(data, dtype="<u8", offset=4).astype(np.uint64))


KIND_CODES = {"b": 0, "s": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@message
@dataclass
class ShareRequest:
    """Payload: u32 n | (u32 target, u8 kind)[n], kind 0 = self-mask seed b, 1 = mask key s"""

    TAG: ClassVar[int] = 6
    requests: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        body = b"".join(struct.pack("<IB", t, KIND_CODES[k]) for t, k in self.requests)
        return struct.pack("<I", len(self.requests)) + body

    @classmethod
    def from_bytes(cls, data: bytes):
        (n,) = struct.unpack_from("<I", data)
        reqs = []
        for i in range(n):
            t, k = struct.unpack_from("<IB", data, 4 + 5 * i)
            reqs.append((t, KIND_NAMES[k]))
        return cls(reqs)


@message
@dataclass
class ShareResponse:
    """Payload: u32 holder | u32 n | (u32 target, u8 kind, u16 len, share)[n]"""

    TAG: ClassVar[int] = 7
    holder: int
    shares: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<II", self.holder, len(self.shares))]
        for target, kind, blob in self.shares:
            parts.append(struct.pack("<IBH", target, KIND_CODES[kind], len(blob)) + blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes):
        holder, n = struct.unpack_from("<II", data)
        pos, out = 8, []
        for _ in range(n):
            target, kind, length = struct.unpack_from("<IBH", data, pos)
            pos += 7
            out.append((target, KIND_NAMES[kind], bytes(data[pos : pos + length])))
            pos += length
        return cls(holder, out)
