"""Per-session key material: ed25519 signing plus two x25519 agreements.

The ``s`` agreement yields pairwise mask seeds (MD5 of the shared secret,
16 bytes). The ``c`` agreement keys ChaCha20-Poly1305 for share transport.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from ..errors import ProtocolError
from ..wire import KeyAdvert

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
_RAW_PRIV = dict(
    encoding=serialization.Encoding.Raw,
    format=serialization.PrivateFormat.Raw,
    encryption_algorithm=serialization.NoEncryption(),
)


def _advert_message(session_id: int, owner: int, s_pk: bytes, c_pk: bytes) -> bytes:
    return b"fednewsrec/keys" + struct.pack("<QI", session_id, owner) + s_pk + c_pk


@dataclass
class ParticipantKeys:
    sign_sk: Ed25519PrivateKey
    s_sk: X25519PrivateKey
    c_sk: X25519PrivateKey

    @classmethod
    def generate(cls) -> "ParticipantKeys":
        return cls(Ed25519PrivateKey.generate(), X25519PrivateKey.generate(), X25519PrivateKey.generate())

    @property
    def s_sk_bytes(self) -> bytes:
        return self.s_sk.private_bytes(**_RAW_PRIV)

    def advert(self, owner: int, session_id: int) -> KeyAdvert:
        s_pk = self.s_sk.public_key().public_bytes(**_RAW)
        c_pk = self.c_sk.public_key().public_bytes(**_RAW)
        sig = self.sign_sk.sign(_advert_message(session_id, owner, s_pk, c_pk))
        return KeyAdvert(owner, self.sign_sk.public_key().public_bytes(**_RAW), s_pk, c_pk, sig)


def verify_advert(adv: KeyAdvert, session_id: int) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(adv.sign_pk).verify(
            adv.signature, _advert_message(session_id, adv.owner, adv.s_pk, adv.c_pk)
        )
    except (InvalidSignature, ValueError):
        return False
    return True


def pairwise_seed(sk: X25519PrivateKey | bytes, peer_pk: bytes) -> bytes:
    if isinstance(sk, bytes):
        sk = X25519PrivateKey.from_private_bytes(sk)
    shared = sk.exchange(X25519PublicKey.from_public_bytes(peer_pk))
    return hashlib.md5(shared).digest()


def channel_key(sk: X25519PrivateKey, peer_pk: bytes) -> bytes:
    shared = sk.exchange(X25519PublicKey.from_public_bytes(peer_pk))
    return hashlib.sha256(b"fednewsrec/share" + shared).digest()


def _nonce(owner: int, holder: int) -> bytes:
    return struct.pack("<IIi", owner, holder, 0)


def encrypt_share(key: bytes, owner: int, holder: int, plaintext: bytes) -> bytes:
    aad = struct.pack("<II", owner, holder)
    return ChaCha20Poly1305(key).encrypt(_nonce(owner, holder), plaintext, aad)


def decrypt_share(key: bytes, owner: int, holder: int, ciphertext: bytes) -> bytes:
    aad = struct.pack("<II", owner, holder)
    try:
        return ChaCha20Poly1305(key).decrypt(_nonce(owner, holder), ciphertext, aad)
    except InvalidTag:
        raise ProtocolError(f"share from {owner} to {holder} failed authentication") from None
