"""Desk-scale news recommendation model with hand-written gradients.

The model is split the same way the federated protocol splits it:

* a news encoder (server only) mapping a tokenised title to a ``d``-vector,
* a user model (shared) pooling clicked-news vectors into a user vector with
  multi-head self-attention followed by additive attention,
* a dot-product click scorer trained with softmax cross-entropy over one
  clicked and ``K`` non-clicked candidates.

All parameters live in :class:`ParamVector` buffers so that a parameter set
and its gradient share one flat float64 layout. The user-model layout is::

    wq      (d, d)    query projection, head k owns columns k*dh:(k+1)*dh
    wk      (d, d)    key projection
    wv      (d, d)    value projection
    attn_w  (d, da)   additive-attention hidden projection
    attn_q  (da,)     additive-attention query

and the news-encoder layout is::

    token_embeddings  (V, d_tok)
    projection        (d_tok, d)
    attention_query   (d,)       only used with ``pooling="attention"``

Every segment is stored row-major, in the order listed.
"""

from __future__ import annotations

import copy
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, ProtocolError

INIT_SCALE = 0.1


class ParamVector:
    """Flat float64 buffer with named row-major segments.

    Segment accessors return views, so in-place edits through a segment are
    visible in :attr:`flat` and vice versa.
    """

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], flat=None):
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        if flat is None:
            self.flat = np.zeros(offset)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (offset,):
                raise InputError(f"expected flat vector of size {offset}, got {flat.shape}")
            self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self._slices[name]
        return self.flat[start:stop].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def segment(self, name: str) -> slice:
        start, stop, _ = self._slices[name]
        return slice(start, stop)

    def with_flat(self, flat) -> "ParamVector":
        """Same layout (and metadata), different buffer."""
        other = copy.copy(self)
        ParamVector.__init__(other, self.layout, np.array(flat, dtype=np.float64))
        return other

    def copy(self) -> "ParamVector":
        return self.with_flat(self.flat)

    def zeros_like(self) -> "ParamVector":
        return self.with_flat(np.zeros_like(self.flat))

    def __repr__(self) -> str:
        segs = ", ".join(f"{n}{s}" for n, s in self.layout)
        return f"{type(self).__name__}({segs})"


class UserModelParams(ParamVector):
    def __init__(self, news_dim: int, n_heads: int = 4, attn_dim: int = 200, flat=None):
        if news_dim % n_heads:
            raise InputError(f"news_dim {news_dim} not divisible by n_heads {n_heads}")
        self.news_dim = news_dim
        self.n_heads = n_heads
        self.attn_dim = attn_dim
        d = news_dim
        super().__init__(
            [
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("attn_w", (d, attn_dim)),
                ("attn_q", (attn_dim,)),
            ],
            flat,
        )

    @classmethod
    def init(cls, news_dim: int, n_heads: int = 4, attn_dim: int = 200, rng=None):
        rng = np.random.default_rng(rng)
        p = cls(news_dim, n_heads, attn_dim)
        p.flat[:] = rng.uniform(-INIT_SCALE, INIT_SCALE, p.size)
        return p


class NewsEncoderParams(ParamVector):
    def __init__(
        self,
        vocab_size: int,
        token_dim: int,
        news_dim: int,
        pooling: str = "mean",
        flat=None,
    ):
        if pooling not in ("mean", "attention"):
            raise InputError(f"unknown pooling {pooling!r}")
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.news_dim = news_dim
        self.pooling = pooling
        super().__init__(
            [
                ("token_embeddings", (vocab_size, token_dim)),
                ("projection", (token_dim, news_dim)),
                ("attention_query", (news_dim,)),
            ],
            flat,
        )

    @classmethod
    def init(cls, vocab_size, token_dim, news_dim, pooling="mean", rng=None):
        rng = np.random.default_rng(rng)
        p = cls(vocab_size, token_dim, news_dim, pooling)
        p.flat[:] = rng.uniform(-INIT_SCALE, INIT_SCALE, p.size)
        return p


@dataclass(frozen=True)
class NewsContent:
    id: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise InputError(f"news {self.id!r} has no tokens")


@dataclass(frozen=True)
class NewsRepr:
    id: str
    vec: np.ndarray


@dataclass
class TrainingSample:
    history: tuple[str, ...]
    candidates: tuple[str, ...]
    label_index: int = 0

    def __post_init__(self):
        self.history = tuple(self.history)
        self.candidates = tuple(self.candidates)
        if not 0 <= self.label_index < len(self.candidates):
            raise InputError("label_index outside candidate list")

    def items(self) -> set[str]:
        return set(self.history) | set(self.candidates)


@dataclass
class LocalGradients:
    """Mean-loss gradients of one client (not yet weighted by sample count)."""

    user_grad: np.ndarray
    repr_grads: dict[str, np.ndarray]
    sample_count: int
    loss: float = 0.0


class NewsTable:
    """Item id -> representation, backed by one dense ``(n_items, d)`` matrix."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        self.ids = list(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.shape[0] != len(self.ids):
            raise InputError("row count does not match id count")
        self.index = {nid: i for i, nid in enumerate(self.ids)}

    def __getitem__(self, nid: str) -> np.ndarray:
        return self.matrix[self.index[nid]]

    def __contains__(self, nid) -> bool:
        return nid in self.index

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Iterable[str]) -> dict[str, np.ndarray]:
        return {nid: self.matrix[self.index[nid]] for nid in ids}


# ---------------------------------------------------------------------------
# small numerics


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def softmax(scores) -> np.ndarray:
    return _softmax(np.asarray(scores, dtype=np.float64))


# ---------------------------------------------------------------------------
# news encoder


def _check_tokens(params: NewsEncoderParams, content: NewsContent) -> np.ndarray:
    toks = np.asarray(content.tokens, dtype=np.int64)
    if toks.size == 0:
        raise InputError(f"news {content.id!r} has no tokens")
    if toks.min() < 0 or toks.max() >= params.vocab_size:
        raise InputError(f"news {content.id!r} has token index outside vocabulary")
    return toks


def _encode_tokens(params: NewsEncoderParams, toks: np.ndarray):
    emb = params["token_embeddings"][toks]
    proj = params["projection"]
    if params.pooling == "mean":
        pooled = emb.mean(axis=0)
        return pooled @ proj, pooled
    hidden = emb @ proj
    weights = _softmax(hidden @ params["attention_query"])
    return weights @ hidden, (hidden, weights)


def encode_news(params: NewsEncoderParams, content: NewsContent) -> NewsRepr:
    toks = _check_tokens(params, content)
    vec, _ = _encode_tokens(params, toks)
    return NewsRepr(content.id, vec)


def encode_corpus(params: NewsEncoderParams, contents: Sequence[NewsContent]) -> np.ndarray:
    """Encode many items at once; rows follow ``contents`` order."""
    if not contents:
        return np.zeros((0, params.news_dim))
    if params.pooling != "mean":
        return np.stack([encode_news(params, c).vec for c in contents])
    toks, seg, lengths = _flatten_tokens(params, contents)
    pooled = np.zeros((len(contents), params.token_dim))
    np.add.at(pooled, seg, params["token_embeddings"][toks])
    pooled /= lengths[:, None]
    return pooled @ params["projection"]


def _flatten_tokens(params, contents):
    arrays = [_check_tokens(params, c) for c in contents]
    lengths = np.array([a.size for a in arrays], dtype=np.float64)
    toks = np.concatenate(arrays)
    seg = np.repeat(np.arange(len(arrays)), [a.size for a in arrays])
    return toks, seg, lengths


def news_encoder_backward(
    params: NewsEncoderParams,
    contents: Sequence[NewsContent],
    repr_grads: Mapping[str, np.ndarray],
) -> NewsEncoderParams:
    """Chain representation gradients back to encoder parameters.

    Returns ``sum_i dL/dn_i * dn_i/dTheta_n`` over the items in ``repr_grads``
    as a parameter-shaped buffer.
    """
    by_id = {c.id: c for c in contents}
    missing = set(repr_grads) - set(by_id)
    if missing:
        raise InputError(f"gradients for items without content: {sorted(missing)[:5]}")
    grad = params.zeros_like()
    ids = [nid for nid in repr_grads]
    if not ids:
        return grad
    chosen = [by_id[nid] for nid in ids]
    G = np.stack([np.asarray(repr_grads[nid], dtype=np.float64) for nid in ids])
    emb_grad = grad["token_embeddings"]
    proj = params["projection"]

    if params.pooling == "mean":
        toks, seg, lengths = _flatten_tokens(params, chosen)
        pooled = np.zeros((len(chosen), params.token_dim))
        np.add.at(pooled, seg, params["token_embeddings"][toks])
        pooled /= lengths[:, None]
        grad["projection"] = pooled.T @ G
        d_pooled = (G @ proj.T) / lengths[:, None]
        np.add.at(emb_grad, toks, d_pooled[seg])
        return grad

    q = params["attention_query"]
    for content, g in zip(chosen, G):
        toks = _check_tokens(params, content)
        emb = params["token_embeddings"][toks]
        hidden = emb @ proj
        w = _softmax(hidden @ q)
        d_w = hidden @ g
        d_logit = w * (d_w - w @ d_w)
        d_hidden = np.outer(w, g) + np.outer(d_logit, q)
        grad["attention_query"] += d_logit @ hidden
        grad["projection"] += emb.T @ d_hidden
        np.add.at(emb_grad, toks, d_hidden @ proj.T)
    return grad


# ---------------------------------------------------------------------------
# user model


def _user_forward(p: UserModelParams, X: np.ndarray, drop_mask=None):
    M, d = X.shape
    h = p.n_heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh)

    def heads(W):
        return (X @ W).reshape(M, h, dh).transpose(1, 0, 2)

    Q, K, V = heads(p["wq"]), heads(p["wk"]), heads(p["wv"])
    A = _softmax(Q @ K.transpose(0, 2, 1) * scale, axis=-1)
    H = (A @ V).transpose(1, 0, 2).reshape(M, d)
    if drop_mask is not None:
        H = H * drop_mask
    T = np.tanh(H @ p["attn_w"])
    alpha = _softmax(T @ p["attn_q"])
    u = alpha @ H
    cache = (X, Q, K, V, A, H, T, alpha, drop_mask, scale)
    return u, cache


def _user_backward(p: UserModelParams, cache, du: np.ndarray):
    X, Q, K, V, A, H, T, alpha, drop_mask, scale = cache
    M, d = X.shape
    h = p.n_heads
    dh = d // h
    grad = p.zeros_like()

    dH = np.outer(alpha, du)
    d_alpha = H @ du
    d_e = alpha * (d_alpha - alpha @ d_alpha)
    grad["attn_q"] = T.T @ d_e
    dZ = np.outer(d_e, p["attn_q"]) * (1.0 - T * T)
    grad["attn_w"] = H.T @ dZ
    dH += dZ @ p["attn_w"].T
    if drop_mask is not None:
        dH = dH * drop_mask

    dHh = dH.reshape(M, h, dh).transpose(1, 0, 2)
    dA = dHh @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dHh
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q

    def flat(t):
        return t.transpose(1, 0, 2).reshape(M, d)

    dQ, dK, dV = flat(dQ), flat(dK), flat(dV)
    grad["wq"] = X.T @ dQ
    grad["wk"] = X.T @ dK
    grad["wv"] = X.T @ dV
    dX = dQ @ p["wq"].T + dK @ p["wk"].T + dV @ p["wv"].T
    return grad, dX


def encode_user(params: UserModelParams, history_reprs) -> np.ndarray:
    """User vector from clicked-news vectors; an empty history gives zeros."""
    X = np.asarray(history_reprs, dtype=np.float64)
    if X.size == 0:
        return np.zeros(params.news_dim)
    if X.ndim != 2 or X.shape[1] != params.news_dim:
        raise InputError(f"history must be (M, {params.news_dim}), got {X.shape}")
    u, _ = _user_forward(params, X)
    return u


# ---------------------------------------------------------------------------
# scoring and loss


def score(user_vec, cand_vec) -> float:
    u = np.asarray(user_vec, dtype=np.float64)
    n = np.asarray(cand_vec, dtype=np.float64)
    if u.shape != n.shape:
        raise InputError(f"dimension mismatch {u.shape} vs {n.shape}")
    return float(u @ n)


def sample_loss(scores, label_index: int) -> float:
    """Softmax cross-entropy of the clicked candidate, via a max-shift."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or not 0 <= label_index < s.size:
        raise InputError("scores must be 1-d and label_index within range")
    top = int(np.argmax(s))
    rest = np.exp(np.delete(s, top) - s[top])
    lse = s[top] + math.log1p(float(rest.sum()))
    return float(lse - s[label_index])


def _resolve(reprs, nid):
    try:
        return reprs[nid]
    except KeyError:
        raise ProtocolError(f"no representation available for item {nid!r}") from None


def _group_by_history(samples):
    groups: dict[tuple, list] = defaultdict(list)
    for s in samples:
        groups[s.history].append(s)
    return groups


def user_loss(samples: Sequence[TrainingSample], user_params: UserModelParams, reprs) -> float:
    """Mean cross-entropy over a client's samples."""
    if not samples:
        raise InputError("user_loss needs at least one sample")
    total = 0.0
    for history, group in _group_by_history(samples).items():
        X = np.array([_resolve(reprs, nid) for nid in history])
        u = encode_user(user_params, X)
        for s in group:
            C = np.array([_resolve(reprs, nid) for nid in s.candidates])
            total += sample_loss(C @ u, s.label_index)
    return total / len(samples)


def backward(
    samples: Sequence[TrainingSample],
    user_params: UserModelParams,
    reprs,
    dropout: float = 0.0,
    rng=None,
) -> LocalGradients:
    """Analytic gradients of :func:`user_loss` w.r.t. the user model and every
    referenced item representation.

    ``dropout > 0`` masks the self-attention output (inverted scaling) and
    makes the result stochastic; the default path is exact.
    """
    user_grad = np.zeros(user_params.size)
    repr_grads: dict[str, np.ndarray] = {}
    if not samples:
        return LocalGradients(user_grad, repr_grads, 0, 0.0)
    if dropout and rng is None:
        rng = np.random.default_rng()
    d = user_params.news_dim
    total_loss = 0.0

    def add(nid, g):
        if nid in repr_grads:
            repr_grads[nid] += g
        else:
            repr_grads[nid] = np.array(g, dtype=np.float64)

    for history, group in _group_by_history(samples).items():
        if history:
            X = np.array([_resolve(reprs, nid) for nid in history])
            mask = None
            if dropout:
                keep = rng.random((len(history), d)) >= dropout
                mask = keep / (1.0 - dropout)
            u, cache = _user_forward(user_params, X, mask)
        else:
            u, cache = np.zeros(d), None
        du = np.zeros(d)
        for s in group:
            C = np.array([_resolve(reprs, nid) for nid in s.candidates])
            sc = C @ u
            total_loss += sample_loss(sc, s.label_index)
            ds = _softmax(sc)
            ds[s.label_index] -= 1.0
            du += C.T @ ds
            for nid, row in zip(s.candidates, np.outer(ds, u)):
                add(nid, row)
        if cache is not None:
            g, dX = _user_backward(user_params, cache, du)
            user_grad += g.flat
            for nid, row in zip(history, dX):
                add(nid, row)

    n = len(samples)
    user_grad /= n
    for nid in repr_grads:
        repr_grads[nid] /= n
    return LocalGradients(user_grad, repr_grads, n, total_loss / n)
