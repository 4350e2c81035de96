"""Dropout-tolerant secure summation (pairwise masks + self masks + Shamir).

Four message rounds, all routed through the server:

1. keys     each client advertises signed x25519 public keys; the server
            broadcasts every advert and each receiver verifies signatures.
2. shares   each client Shamir-shares its self-mask seed ``b`` and its
            mask private key ``s_sk`` to every verified peer, encrypted
            under the pairwise ``c`` channel key.
3. masked   each client uploads
            ``y_u = x_u + PRG(b_u) + sum_{v>u} PRG(s_uv) - sum_{v<u} PRG(s_uv)``.
4. unmask   for every client whose ``y`` arrived the server collects shares
            of ``b``; for every client that sent shares but no ``y`` it
            collects shares of ``s_sk`` and rebuilds the dangling pairwise
            masks. No client ever has both kinds revealed.

Any phase with fewer than ``t`` surviving participants aborts the session.
"""

from __future__ import annotations

import math
import secrets
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError, SecAggAborted
from ..netsim import SERVER, Bus
from ..wire import KeyAdvert, KeyList, MaskedInput, ShareBundle, ShareDeliver, ShareRequest, ShareResponse
from . import shamir
from .keys import (
    ParticipantKeys,
    channel_key,
    decrypt_share,
    encrypt_share,
    pairwise_seed,
    verify_advert,
)
from .prg import PRGS, expand


@dataclass(frozen=True)
class SecAggConfig:
    n: int = 50
    t: int = 25
    modulus_bits: int = 64
    frac_bits: int = 24
    seed_bytes: int = 16
    prg: str = "mt19937"

    def __post_init__(self):
        if not 1 <= self.t <= self.n:
            raise ProtocolError(f"need 1 <= t <= n, got t={self.t}, n={self.n}")
        if not 0 <= self.frac_bits < 63:
            raise ProtocolError("frac_bits must be below 63")
        if self.modulus_bits != 64:
            raise ProtocolError("only the 2^64 modulus is supported")
        if self.prg not in PRGS:
            raise ProtocolError(f"unknown prg {self.prg!r}")

    def threshold_for(self, participants: int) -> int:
        """Threshold for a session of ``participants`` clients, keeping ``t/n``."""
        return max(1, math.ceil(self.t * participants / self.n))


def _pack_pair(b_share: shamir.SecretShare, s_share: shamir.SecretShare) -> bytes:
    b = b_share.to_bytes()
    return struct.pack("<H", len(b)) + b + s_share.to_bytes()


def _unpack_pair(blob: bytes):
    (nb,) = struct.unpack_from("<H", blob)
    return shamir.SecretShare.from_bytes(blob[2 : 2 + nb]), shamir.SecretShare.from_bytes(blob[2 + nb :])


def pair_sign(u: int, v: int) -> int:
    """+1 if ``u`` adds the (u, v) pairwise mask, -1 if it subtracts it."""
    return 1 if u < v else -1


class SecAggClient:
    """One participant's session state. Owned by that participant only."""

    def __init__(self, party: int, cfg: SecAggConfig, session_id: int, threshold: int):
        self.party = party
        self.cfg = cfg
        self.session_id = session_id
        self.threshold = threshold
        self.keys = ParticipantKeys.generate()
        self.b_seed = secrets.token_bytes(cfg.seed_bytes)
        self.peers: dict[int, KeyAdvert] = {}
        self.held: dict[int, tuple[shamir.SecretShare, shamir.SecretShare]] = {}
        self.revealed: dict[int, str] = {}
        self._channels: dict[int, bytes] = {}

    def _channel(self, peer: int) -> bytes:
        if peer not in self._channels:
            self._channels[peer] = channel_key(self.keys.c_sk, self.peers[peer].c_pk)
        return self._channels[peer]

    def advertise(self) -> KeyAdvert:
        return self.keys.advert(self.party, self.session_id)

    def on_key_list(self, key_list: KeyList) -> ShareBundle:
        self.peers = {a.owner: a for a in key_list.adverts if verify_advert(a, self.session_id)}
        if self.party not in self.peers:
            raise ProtocolError(f"client {self.party} missing from its own key list")
        if len(self.peers) < self.threshold:
            raise SecAggAborted(f"only {len(self.peers)} verified peers, need {self.threshold}")
        holders = sorted(self.peers)
        b_shares = shamir.make_shares(self.b_seed, self.threshold, indices=holders, owner=self.party)
        s_shares = shamir.make_shares(self.keys.s_sk_bytes, self.threshold, indices=holders, owner=self.party)
        out = []
        for v, bs, ss in zip(holders, b_shares, s_shares):
            if v == self.party:
                self.held[v] = (bs, ss)
                continue
            ct = encrypt_share(self._channel(v), self.party, v, _pack_pair(bs, ss))
            out.append(ShareDeliver(self.party, v, ct))
        return ShareBundle(out)

    def on_shares(self, bundle: ShareBundle) -> None:
        for d in bundle.shares:
            if d.holder != self.party or d.owner not in self.peers:
                raise ProtocolError(f"misrouted share {d.owner}->{d.holder} at {self.party}")
            plain = decrypt_share(self._channel(d.owner), d.owner, d.holder, d.ciphertext)
            bs, ss = _unpack_pair(plain)
            if bs.owner != d.owner or ss.owner != d.owner:
                raise ProtocolError("share owner does not match envelope")
            self.held[d.owner] = (bs, ss)

    def masked_input(self, x: np.ndarray) -> MaskedInput:
        x = np.asarray(x, dtype=np.uint64)
        y = x + expand(self.b_seed, x.size, self.cfg.prg)
        for v in sorted(self.held):
            if v == self.party:
                continue
            mask = expand(pairwise_seed(self.keys.s_sk, self.peers[v].s_pk), x.size, self.cfg.prg)
            if pair_sign(self.party, v) > 0:
                y += mask
            else:
                y -= mask
        return MaskedInput(self.party, y)

    def on_request(self, req: ShareRequest) -> ShareResponse:
        kinds: dict[int, str] = {}
        for target, kind in req.requests:
            if kinds.setdefault(target, kind) != kind or self.revealed.get(target, kind) != kind:
                raise ProtocolError(f"both b and s shares requested for client {target}")
        out = []
        for target, kind in req.requests:
            if target not in self.held:
                continue
            self.revealed[target] = kind
            bs, ss = self.held[target]
            out.append((target, kind, (bs if kind == "b" else ss).to_bytes()))
        return ShareResponse(self.party, out)


class SecAggServer:
    def __init__(self, cfg: SecAggConfig, session_id: int, threshold: int, length: int):
        self.cfg = cfg
        self.session_id = session_id
        self.threshold = threshold
        self.length = length
        self.adverts: dict[int, KeyAdvert] = {}
        self.u1: set[int] = set()
        self.u2: set[int] = set()
        self.u3: set[int] = set()
        self.sum: np.ndarray | None = None

    def _need(self, live, phase):
        if len(live) < self.threshold:
            raise SecAggAborted(f"{phase}: {len(live)} live participants, threshold {self.threshold}")

    def on_adverts(self, adverts) -> KeyList:
        self.adverts = {a.owner: a for a in adverts if verify_advert(a, self.session_id)}
        self.u1 = set(self.adverts)
        self._need(self.u1, "keys")
        return KeyList([self.adverts[p] for p in sorted(self.u1)])

    def route_shares(self, bundles: dict[int, ShareBundle]) -> dict[int, ShareBundle]:
        self.u2 = {p for p in bundles if p in self.u1}
        self._need(self.u2, "shares")
        routed: dict[int, list] = {p: [] for p in sorted(self.u2)}
        for owner in sorted(self.u2):
            for d in bundles[owner].shares:
                if d.owner != owner:
                    raise ProtocolError(f"client {owner} sent a share claiming owner {d.owner}")
                if d.holder in routed:
                    routed[d.holder].append(d)
        return {h: ShareBundle(s) for h, s in routed.items()}

    def on_masked(self, inputs: dict[int, MaskedInput]) -> None:
        self.u3 = {p for p in inputs if p in self.u2}
        self._need(self.u3, "masked")
        total = np.zeros(self.length, dtype=np.uint64)
        for p in sorted(self.u3):
            vec = inputs[p].vector
            if vec.size != self.length:
                raise ProtocolError(f"client {p} sent length {vec.size}, expected {self.length}")
            total += vec
        self.sum = total

    def share_request(self) -> ShareRequest:
        reqs = [(p, "b") for p in sorted(self.u3)]
        reqs += [(p, "s") for p in sorted(self.u2 - self.u3)]
        return ShareRequest(reqs)

    def finish(self, responses) -> np.ndarray:
        responders = {r.holder: r for r in responses if r.holder in self.u3}
        self._need(responders, "unmask")
        collected: dict[tuple[int, str], list] = {}
        for holder in sorted(responders):
            for target, kind, blob in responders[holder].shares:
                share = shamir.SecretShare.from_bytes(blob)
                if share.owner != target or share.index != holder:
                    raise ProtocolError(f"bad share for {target} from {holder}")
                collected.setdefault((target, kind), []).append(share)

        cache: dict = {}

        def recover(target, kind) -> bytes:
            shares = collected.get((target, kind), [])
            if len(shares) < self.threshold:
                raise SecAggAborted(f"only {len(shares)} shares of {kind} for client {target}")
            return shamir.reconstruct(shares, self.threshold, cache)

        total = self.sum.copy()
        for u in sorted(self.u3):
            total -= expand(recover(u, "b"), self.length, self.cfg.prg)
        for v in sorted(self.u2 - self.u3):
            s_sk = recover(v, "s")
            for u in sorted(self.u3):
                mask = expand(pairwise_seed(s_sk, self.adverts[u].s_pk), self.length, self.cfg.prg)
                if pair_sign(u, v) > 0:
                    total -= mask
                else:
                    total += mask
        return total


@dataclass
class SecAggResult:
    total: np.ndarray
    included: list[int]


def _of_type(msgs, cls):
    return [(s, m) for s, m in msgs if isinstance(m, cls)]


def secure_sum(
    bus: Bus,
    inputs: dict[int, np.ndarray],
    cfg: SecAggConfig,
    session_id: int,
    phase_prefix: str,
    threshold: int | None = None,
) -> SecAggResult:
    """Run one full session over ``bus`` and return the sum of the inputs of
    every client whose masked vector reached the server.

    ``inputs`` maps party id to its uint64 vector; only parties the bus
    reports alive at each phase take part. Raises :class:`SecAggAborted`
    when any phase falls below the threshold.
    """
    parties = sorted(inputs)
    lengths = {np.asarray(v).size for v in inputs.values()}
    if len(lengths) != 1:
        raise ProtocolError("all inputs of a session must have the same length")
    length = lengths.pop()
    t = threshold or cfg.threshold_for(len(parties))
    server = SecAggServer(cfg, session_id, t, length)
    clients: dict[int, SecAggClient] = {}

    bus.set_phase(f"{phase_prefix}.keys")
    for p in parties:
        if bus.alive(p):
            with bus.timed(p, "secagg"):
                clients[p] = SecAggClient(p, cfg, session_id, t)
                adv = clients[p].advertise()
            bus.send(p, SERVER, adv)
    adverts = [m for _, m in _of_type(bus.recv(SERVER), KeyAdvert)]
    with bus.timed(SERVER, "secagg"):
        key_list = server.on_adverts(adverts)
    for p in sorted(server.u1):
        bus.send(SERVER, p, key_list)

    bus.set_phase(f"{phase_prefix}.shares")
    for p in sorted(server.u1):
        if not bus.alive(p):
            continue
        lists = _of_type(bus.recv(p), KeyList)
        if not lists:
            continue
        with bus.timed(p, "secagg"):
            bundle = clients[p].on_key_list(lists[-1][1])
        bus.send(p, SERVER, bundle)
    bundles = {s: m for s, m in _of_type(bus.recv(SERVER), ShareBundle)}
    with bus.timed(SERVER, "secagg"):
        routed = server.route_shares(bundles)
    for holder, b in routed.items():
        bus.send(SERVER, holder, b)

    bus.set_phase(f"{phase_prefix}.masked")
    for p in sorted(server.u2):
        if not bus.alive(p):
            continue
        with bus.timed(p, "secagg"):
            for _, b in _of_type(bus.recv(p), ShareBundle):
                clients[p].on_shares(b)
            y = clients[p].masked_input(inputs[p])
        bus.send(p, SERVER, y)
    masked = {s: m for s, m in _of_type(bus.recv(SERVER), MaskedInput)}
    with bus.timed(SERVER, "secagg"):
        server.on_masked(masked)

    bus.set_phase(f"{phase_prefix}.unmask")
    request = server.share_request()
    for p in sorted(server.u3):
        bus.send(SERVER, p, request)
    for p in sorted(server.u3):
        if not bus.alive(p):
            continue
        with bus.timed(p, "secagg"):
            responses = [clients[p].on_request(r) for _, r in _of_type(bus.recv(p), ShareRequest)]
        for r in responses:
            bus.send(p, SERVER, r)
    replies = [m for _, m in _of_type(bus.recv(SERVER), ShareResponse)]
    with bus.timed(SERVER, "secagg"):
        total = server.finish(replies)
    return SecAggResult(total, sorted(server.u3))
