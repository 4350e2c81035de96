"""Federated training rounds for the split news recommender.

The server keeps the news encoder, the full news-representation table and
the global user model. One round (:func:`run_round`) does:

1. sample a client group and compute the union of their item sets
   (privately through an indicator-vector secure sum, or in plaintext);
2. send every live group member the user model and the representations of
   the union items;
3. each client computes one full-batch gradient on its own samples and
   uploads ``[|B_u| g_user, |B_u| g_repr, |B_u| loss, |B_u|]``, summed by
   secure aggregation or in plaintext;
4. the server divides by the weight sum, applies FedAdam to the user model,
   chains the representation gradient through the news encoder, applies
   Adam to the encoder and re-encodes the whole corpus.

The ``whole-model`` mode instead ships the news encoder to clients, which
encode their items locally and upload encoder gradients directly; it exists
as a communication-cost baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Behavior, Corpus, build_samples
from .errors import ConfigError, InputError, ProtocolError, RoundRejected, SecAggAborted
from .netsim import SERVER, Bus, RoundCost, measure_round
from .recmodel import (
    LocalGradients,
    NewsContent,
    NewsEncoderParams,
    NewsTable,
    TrainingSample,
    UserModelParams,
    backward,
    encode_corpus,
    news_encoder_backward,
)
from .secagg import SecAggConfig, decode_union, dequantize, encode_union, quantize, secure_sum
from .wire import EncoderBroadcast, ItemSetUpload, ModelBroadcast, PlainUpload, ReprBroadcast

MODES = ("efficient", "whole-model")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-8
    group_size: int = 50
    K: int = 4
    # add the step instead of subtracting it (audit switch; ascends the loss)
    strict_plus_sign: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.group_size < 1 or self.K < 1:
            raise ConfigError("group_size and K must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    news_dim: int = 400
    token_dim: int = 64
    n_heads: int = 4
    attn_dim: int = 200
    pooling: str = "mean"

    def __post_init__(self):
        if min(self.news_dim, self.token_dim, self.n_heads, self.attn_dim) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.news_dim % self.n_heads:
            raise ConfigError("news_dim must be divisible by n_heads")
        if self.pooling not in ("mean", "attention"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")


@dataclass(frozen=True)
class FedConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    secagg: SecAggConfig = field(default_factory=SecAggConfig)
    secure: bool = True
    mode: str = "efficient"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamMoments:
    delta: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamMoments":
        return cls(np.zeros(size), np.zeros(size))

    def copy(self) -> "AdamMoments":
        return AdamMoments(self.delta.copy(), self.v.copy())


def adam_update(theta: np.ndarray, moments: AdamMoments, grad, cfg: OptimizerConfig):
    """``delta <- b1 delta + (1-b1) g; v <- b2 v + (1-b2) delta^2;
    theta <- theta - lr delta / sqrt(v + tau)``. Returns new arrays."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != theta.shape or moments.delta.shape != theta.shape:
        raise InputError("gradient and moments must match the parameter layout")
    if not np.all(np.isfinite(g)):
        raise RoundRejected("non-finite gradient")
    delta = cfg.beta1 * moments.delta + (1 - cfg.beta1) * g
    v = cfg.beta2 * moments.v + (1 - cfg.beta2) * delta**2
    step = cfg.lr * delta / np.sqrt(v + cfg.tau)
    new = theta + step if cfg.strict_plus_sign else theta - step
    return new, AdamMoments(delta, v)


def fedadam_step(user_model: UserModelParams, moments: AdamMoments, grad, cfg: OptimizerConfig):
    flat, m = adam_update(user_model.flat, moments, grad, cfg)
    return user_model.with_flat(flat), m


def adam_news_step(encoder: NewsEncoderParams, moments: AdamMoments, grad, cfg: OptimizerConfig):
    flat, m = adam_update(encoder.flat, moments, grad, cfg)
    return encoder.with_flat(flat), m


# ---------------------------------------------------------------------------
# state


def refresh_news_table(encoder: NewsEncoderParams, corpus: Corpus) -> NewsTable:
    return NewsTable(corpus.ids, encode_corpus(encoder, corpus.contents()))


@dataclass
class ServerState:
    news_encoder: NewsEncoderParams
    news_table: NewsTable
    user_model: UserModelParams
    fedadam_moments: AdamMoments
    adam_moments: AdamMoments
    corpus: Corpus
    round_index: int = 0

    @classmethod
    def init(cls, corpus: Corpus, model: ModelConfig, seed: int = 0) -> "ServerState":
        rng = np.random.default_rng(seed)
        enc = NewsEncoderParams.init(corpus.vocab_size, model.token_dim, model.news_dim, model.pooling, rng)
        user = UserModelParams.init(model.news_dim, model.n_heads, model.attn_dim, rng)
        return cls(
            enc,
            refresh_news_table(enc, corpus),
            user,
            AdamMoments.zeros(user.size),
            AdamMoments.zeros(enc.size),
            corpus,
        )


@dataclass
class ClientState:
    """A client's private store. ``samples`` are drawn once when the client
    is built and reused every round."""

    party: int
    user_id: str
    behavior: Behavior
    samples: list[TrainingSample]
    user_model: UserModelParams | None = None
    reprs: dict[str, np.ndarray] = field(default_factory=dict)
    encoder: NewsEncoderParams | None = None

    def item_set(self) -> set[str]:
        return self.behavior.item_set()


def build_clients(users: Mapping[str, object], K: int, seed: int) -> dict[int, ClientState]:
    """One client per user (party ids from 1, in user order)."""
    out = {}
    for party, (uid, ud) in enumerate(users.items(), start=1):
        behavior = ud.train
        rng = np.random.default_rng([seed, party])
        out[party] = ClientState(party, uid, behavior, build_samples(behavior, K, rng))
    return out


# ---------------------------------------------------------------------------
# round steps


def sample_client_group(population: Sequence[int], S: int, rng_seed) -> list[int]:
    """Uniform sample without replacement, returned in ascending order."""
    pop = sorted(population)
    if S > len(pop):
        raise ConfigError(f"group size {S} exceeds population {len(pop)}")
    rng = np.random.default_rng(rng_seed)
    return sorted(int(pop[i]) for i in rng.choice(len(pop), S, replace=False))


def _session_id(round_index: int, kind: int) -> int:
    return (2 * round_index + kind) & 0xFFFFFFFF


def compute_union_set(
    bus: Bus,
    group: Sequence[int],
    clients: Mapping[int, ClientState],
    corpus: Corpus,
    cfg: FedConfig,
    round_index: int,
) -> set[str]:
    """Union of the group's item sets; only the union reaches the server on
    the secure path. Raises :class:`SecAggAborted` if nobody gets through."""
    local = {p: sorted(corpus.index[i] for i in clients[p].item_set()) for p in group}
    if cfg.secure:
        inputs = {}
        for p in group:
            with bus.timed(p, "union"):
                inputs[p] = encode_union(local[p], len(corpus), rng=[cfg.seed, round_index, p])
        res = secure_sum(bus, inputs, cfg.secagg, _session_id(round_index, 0), "union")
        indices = decode_union(res.total)
    else:
        bus.set_phase("union.masked")
        for p in group:
            bus.send(p, SERVER, ItemSetUpload(np.array(local[p], dtype=np.int64)))
        msgs = bus.recv(SERVER)
        if not msgs:
            raise SecAggAborted("no item sets received")
        indices = set()
        for _, m in msgs:
            indices.update(int(i) for i in m.item_index)
    return {corpus.ids[i] for i in indices}


@dataclass
class WeightedUpload:
    """Gradients pre-multiplied by the local sample count."""

    user_grad: np.ndarray
    item_grad: np.ndarray
    loss: float
    weight: float

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.user_grad, self.item_grad.ravel(), [self.loss, self.weight]])


def local_train(client: ClientState, user_model: UserModelParams, reprs, union_ids: Sequence[str]) -> WeightedUpload:
    """Efficient mode: one full-batch gradient, uploaded as ``|B_u|`` times
    the user-model and union-item gradients (zeros for untouched items)."""
    d = user_model.news_dim
    item_grad = np.zeros((len(union_ids), d))
    if not client.samples:
        return WeightedUpload(np.zeros(user_model.size), item_grad, 0.0, 0.0)
    g: LocalGradients = backward(client.samples, user_model, reprs)
    w = float(g.sample_count)
    pos = {nid: k for k, nid in enumerate(union_ids)}
    for nid, vec in g.repr_grads.items():
        if nid not in pos:
            raise ProtocolError(f"client {client.party} touched item {nid} outside the union set")
        item_grad[pos[nid]] = w * vec
    return WeightedUpload(w * g.user_grad, item_grad, w * g.loss, w)


def local_train_whole_model(
    client: ClientState, user_model: UserModelParams, encoder: NewsEncoderParams, corpus: Corpus
) -> WeightedUpload:
    """Whole-model baseline: encode local items with the received encoder
    and upload weighted encoder gradients directly."""
    if not client.samples:
        return WeightedUpload(np.zeros(user_model.size), np.zeros(encoder.size), 0.0, 0.0)
    needed = sorted({nid for s in client.samples for nid in (*s.history, *s.candidates)})
    contents = corpus.contents(needed)
    reprs = dict(zip(needed, encode_corpus(encoder, contents)))
    g = backward(client.samples, user_model, reprs)
    enc_grad = news_encoder_backward(encoder, contents, g.repr_grads)
    w = float(g.sample_count)
    return WeightedUpload(w * g.user_grad, w * enc_grad.flat, w * g.loss, w)


@dataclass
class AggregatedUpdate:
    user_grad_sum: np.ndarray
    item_grad_sum: np.ndarray
    loss_sum: float
    weight_sum: float

    @classmethod
    def from_flat(cls, total: np.ndarray, user_size: int, item_shape) -> "AggregatedUpdate":
        n_item = int(np.prod(item_shape))
        return cls(
            total[:user_size],
            total[user_size : user_size + n_item].reshape(item_shape),
            float(total[-2]),
            float(total[-1]),
        )

    def normalized(self):
        """``(g_user, g_item, mean loss)``; divides by the weight sum once."""
        if not self.weight_sum > 0:
            raise RoundRejected("zero total weight")
        w = self.weight_sum
        return self.user_grad_sum / w, self.item_grad_sum / w, self.loss_sum / w


def aggregate(uploads: Sequence[WeightedUpload]) -> AggregatedUpdate:
    """Plain sum of weighted uploads in the given order."""
    if not uploads:
        raise RoundRejected("no uploads")
    total = np.zeros_like(uploads[0].flatten())
    for u in uploads:
        total += u.flatten()
    return AggregatedUpdate.from_flat(total, uploads[0].user_grad.size, uploads[0].item_grad.shape)


@dataclass
class RoundReport:
    round: int
    group: list[int]
    participants: list[int]
    union_size: int
    loss: float
    weight: float
    skipped: bool
    reason: str
    cost: RoundCost


def _server_update(server: ServerState, g_user, g_encoder, cfg: OptimizerConfig):
    user, mu = fedadam_step(server.user_model, server.fedadam_moments, g_user, cfg)
    enc, mn = adam_news_step(server.news_encoder, server.adam_moments, g_encoder, cfg)
    server.user_model, server.fedadam_moments = user, mu
    server.news_encoder, server.adam_moments = enc, mn
    server.news_table = refresh_news_table(enc, server.corpus)


def run_round(server: ServerState, clients: Mapping[int, ClientState], cfg: FedConfig, bus: Bus) -> RoundReport:
    """Execute one round; the round counter advances even when skipped."""
    t = server.round_index + 1
    bus.start_round(t)
    opt = cfg.optimizer
    group = sample_client_group(list(clients), min(opt.group_size, len(clients)), [cfg.seed, t])
    corpus = server.corpus
    loss, weight, union_ids, participants = float("nan"), 0.0, [], []

    def finish(skipped, reason=""):
        server.round_index = t
        return RoundReport(
            t, group, participants, len(union_ids), loss, weight, skipped, reason, measure_round(bus.ledger, t)
        )

    # step 1: union set (efficient mode only)
    if cfg.mode == "efficient":
        try:
            union = compute_union_set(bus, group, clients, corpus, cfg, t)
        except SecAggAborted as exc:
            return finish(True, f"union: {exc}")
        union_ids = sorted(union, key=corpus.index.__getitem__)

    # step 2: distribution
    bus.set_phase("distribute")
    live = [p for p in group if bus.alive(p)]
    model_msg = ModelBroadcast(server.user_model.flat)
    if cfg.mode == "efficient":
        idx = np.array([corpus.index[i] for i in union_ids], dtype=np.int64)
        extra_msg = ReprBroadcast(idx, server.news_table.matrix[idx] if idx.size else np.zeros((0, server.user_model.news_dim)))
    else:
        extra_msg = EncoderBroadcast(server.news_encoder.flat)
    for p in live:
        bus.send(SERVER, p, model_msg)
        bus.send(SERVER, p, extra_msg)
    received = {}
    for p in live:
        msgs = [m for _, m in bus.recv(p)]
        um = next(m for m in msgs if isinstance(m, ModelBroadcast))
        client = clients[p]
        client.user_model = server.user_model.with_flat(um.values)
        if cfg.mode == "efficient":
            rb = next(m for m in msgs if isinstance(m, ReprBroadcast))
            client.reprs = {corpus.ids[i]: row for i, row in zip(rb.item_index, rb.matrix)}
        else:
            eb = next(m for m in msgs if isinstance(m, EncoderBroadcast))
            client.encoder = server.news_encoder.with_flat(eb.values)
        received[p] = client

    # step 3: local training and upload
    uploads: dict[int, WeightedUpload] = {}
    for p, client in received.items():
        with bus.timed(p, "local_train"):
            if cfg.mode == "efficient":
                uploads[p] = local_train(client, client.user_model, client.reprs, union_ids)
            else:
                uploads[p] = local_train_whole_model(client, client.user_model, client.encoder, corpus)
    if not uploads:
        return finish(True, "no live clients")
    user_size = server.user_model.size
    item_shape = (
        (len(union_ids), server.user_model.news_dim) if cfg.mode == "efficient" else (server.news_encoder.size,)
    )
    try:
        if cfg.secure:
            inputs = {}
            for p, u in uploads.items():
                with bus.timed(p, "quantize"):
                    inputs[p] = quantize(u.flatten(), cfg.secagg.frac_bits)
            res = secure_sum(bus, inputs, cfg.secagg, _session_id(t, 1), "upload")
            participants = res.included
            total = dequantize(res.total, cfg.secagg.frac_bits)
        else:
            bus.set_phase("upload.masked")
            for p, u in uploads.items():
                bus.send(p, SERVER, PlainUpload(u.flatten()))
            got = sorted((s, m) for s, m in bus.recv(SERVER) if isinstance(m, PlainUpload))
            if not got:
                return finish(True, "no uploads")
            participants = [s for s, _ in got]
            total = np.zeros(got[0][1].values.size)
            for _, m in got:
                total += m.values
        agg = AggregatedUpdate.from_flat(total, user_size, item_shape)
        weight = agg.weight_sum
        g_user, g_item, loss = agg.normalized()
    except (SecAggAborted, RoundRejected) as exc:
        return finish(True, f"upload: {exc}")
    except ProtocolError as exc:
        # e.g. a client gradient outside the fixed-point range
        return finish(True, f"upload: {exc}")

    # step 4: global update
    with bus.timed(SERVER, "update"):
        if cfg.mode == "efficient":
            g_enc = news_encoder_backward(
                server.news_encoder, corpus.contents(union_ids), dict(zip(union_ids, g_item))
            ).flat
        else:
            g_enc = g_item
        try:
            _server_update(server, g_user, g_enc, opt)
        except RoundRejected as exc:
            return finish(True, f"update: {exc}")
    return finish(False)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   magic b"FNRC" | u16 version | u32 round | u32 news_dim | u32 n_heads
#   | u32 attn_dim | u32 vocab_size | u32 token_dim | u8 pooling (0 mean, 1 attention)
#   | u64 n_user | u64 n_encoder
#   | f64 user[n_user] | f64 user_delta[n_user] | f64 user_v[n_user]
#   | f64 encoder[n_encoder] | f64 enc_delta[n_encoder] | f64 enc_v[n_encoder]

MAGIC = b"FNRC"
VERSION = 1
_CK_HEAD = struct.Struct("<4sHIIIIIIBQQ")


def save_checkpoint(path, server: ServerState) -> None:
    u, e = server.user_model, server.news_encoder
    head = _CK_HEAD.pack(
        MAGIC,
        VERSION,
        server.round_index,
        u.news_dim,
        u.n_heads,
        u.attn_dim,
        e.vocab_size,
        e.token_dim,
        0 if e.pooling == "mean" else 1,
        u.size,
        e.size,
    )
    arrays = [u.flat, server.fedadam_moments.delta, server.fedadam_moments.v]
    arrays += [e.flat, server.adam_moments.delta, server.adam_moments.v]
    Path(path).write_bytes(head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays))


def load_checkpoint(path, corpus: Corpus) -> ServerState:
    data = Path(path).read_bytes()
    if len(data) < _CK_HEAD.size:
        raise InputError("checkpoint truncated")
    magic, version, rnd, d, h, da, vocab, dtok, pool, nu, ne = _CK_HEAD.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise InputError("not a checkpoint of a supported version")
    expected = _CK_HEAD.size + 8 * 3 * (nu + ne)
    if len(data) != expected:
        raise InputError(f"checkpoint size {len(data)} != {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=_CK_HEAD.size).astype(np.float64)
    parts = np.split(flat, np.cumsum([nu, nu, nu, ne, ne]))
    user = UserModelParams(d, h, da, parts[0])
    enc = NewsEncoderParams(vocab, dtok, d, "mean" if pool == 0 else "attention", parts[3])
    if user.size != nu or enc.size != ne:
        raise InputError("checkpoint dimensions inconsistent")
    return ServerState(
        enc,
        refresh_news_table(enc, corpus),
        user,
        AdamMoments(parts[1], parts[2]),
        AdamMoments(parts[4], parts[5]),
        corpus,
        rnd,
    )
