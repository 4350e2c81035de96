"""Behavior logs, item corpora and negative sampling.

Two sources produce the same :class:`Dataset`:

* :func:`load_mind` reads MIND-style ``behaviors.tsv`` / ``news.tsv``;
* :func:`gen_synthetic` draws a seeded latent-factor world whose clicks
  follow a logistic link on the user/item latent dot product.

Day handling for MIND logs: with ``D >= 2`` distinct days the second-to-last
day supplies training impressions, earlier days only extend click histories,
and the last day is split per impression into validation (20%) and test.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .recmodel import NewsContent, TrainingSample

log = logging.getLogger(__name__)

UNK = "<unk>"
MIND_TIME = "%m/%d/%Y %I:%M:%S %p"


@dataclass(frozen=True)
class Impression:
    id: str
    items: tuple[str, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) != len(self.labels):
            raise InputError(f"impression {self.id}: items and labels differ in length")
        if any(l not in (0, 1) for l in self.labels):
            raise InputError(f"impression {self.id}: labels must be 0/1")

    @property
    def positives(self) -> list[str]:
        return [i for i, l in zip(self.items, self.labels) if l == 1]

    @property
    def negatives(self) -> list[str]:
        return [i for i, l in zip(self.items, self.labels) if l == 0]


@dataclass
class Behavior:
    """One user's locally stored clicks and impression logs."""

    user_id: str
    history: tuple[str, ...]
    impressions: list[Impression] = field(default_factory=list)

    def item_set(self) -> set[str]:
        out = set(self.history)
        for imp in self.impressions:
            out.update(imp.items)
        return out


@dataclass
class UserData:
    user_id: str
    train: Behavior
    eval_history: tuple[str, ...] = ()
    valid: list[Impression] = field(default_factory=list)
    test: list[Impression] = field(default_factory=list)


class Corpus:
    """Item contents with a dense internal index; external ids kept for I/O."""

    def __init__(self, items: dict[str, NewsContent], vocabulary: dict[str, int]):
        self.items = dict(items)
        self.vocabulary = vocabulary
        self.ids = list(self.items)
        self.index = {nid: i for i, nid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, nid) -> bool:
        return nid in self.items

    def contents(self, ids: Iterable[str] | None = None) -> list[NewsContent]:
        ids = self.ids if ids is None else ids
        return [self.items[i] for i in ids]

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)


@dataclass
class Dataset:
    users: dict[str, UserData]
    corpus: Corpus
    stats: dict = field(default_factory=dict)

    def eval_set(self, split: str = "valid"):
        """``(history, impression)`` pairs for every user, in user order."""
        out = []
        for u in self.users.values():
            for imp in getattr(u, split):
                out.append((u.eval_history, imp))
        return out


# ---------------------------------------------------------------------------
# tokenisation


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(texts: Iterable[str], max_size: int | None = None) -> dict[str, int]:
    counts = Counter(tok for t in texts for tok in tokenize(t))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - 1)]
    vocab = {UNK: 0}
    for tok, _ in ranked:
        vocab[tok] = len(vocab)
    return vocab


def encode_title(title: str, vocab: dict[str, int], max_len: int) -> tuple[int, ...]:
    toks = tuple(vocab.get(t, 0) for t in tokenize(title)[:max_len])
    return toks or (0,)


# ---------------------------------------------------------------------------
# negative sampling


def negative_sample(
    impression: Impression, K: int, rng, history: Sequence[str] = ()
) -> list[TrainingSample]:
    """One sample per clicked item with ``K`` non-clicked items from the same
    impression; the clicked item sits at position 0.

    Negatives are drawn without replacement when at least ``K`` exist and
    with replacement otherwise. Impressions without negatives yield nothing.
    """
    rng = np.random.default_rng(rng)
    negs = impression.negatives
    if not negs:
        return []
    out = []
    for pos in impression.positives:
        if len(negs) >= K:
            pick = rng.choice(len(negs), K, replace=False)
        else:
            pick = rng.choice(len(negs), K, replace=True)
        out.append(TrainingSample(tuple(history), (pos, *(negs[i] for i in pick)), 0))
    return out


def build_samples(behavior: Behavior, K: int, rng) -> list[TrainingSample]:
    rng = np.random.default_rng(rng)
    out = []
    for imp in behavior.impressions:
        out.extend(negative_sample(imp, K, rng, behavior.history))
    return out


# ---------------------------------------------------------------------------
# MIND


def _read_lines(paths):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    yield line


def load_news(paths, max_title_len: int = 30, max_vocab: int | None = 50000):
    """Parse ``news.tsv``: id, category, subcategory, title, ... (only id and title used)."""
    titles: dict[str, str] = {}
    skipped = 0
    for line in _read_lines(paths):
        parts = line.split("\t")
        if len(parts) < 4 or not parts[0]:
            skipped += 1
            continue
        titles.setdefault(parts[0], parts[3])
    vocab = build_vocab(titles.values(), max_vocab)
    items = {nid: NewsContent(nid, encode_title(t, vocab, max_title_len)) for nid, t in titles.items()}
    return Corpus(items, vocab), skipped


def _parse_behavior_row(line: str, corpus: Corpus):
    parts = line.split("\t")
    if len(parts) != 5:
        raise ValueError("expected 5 fields")
    imp_id, user, when, hist, cands = parts
    ts = datetime.strptime(when.strip(), MIND_TIME)
    history = tuple(hist.split())
    items, labels = [], []
    for tok in cands.split():
        nid, _, lab = tok.rpartition("-")
        if not nid or lab not in ("0", "1"):
            raise ValueError(f"bad candidate {tok!r}")
        items.append(nid)
        labels.append(int(lab))
    if not items:
        raise ValueError("no candidates")
    unknown = [i for i in (*history, *items) if i not in corpus]
    return imp_id, user, ts, history, Impression(imp_id, tuple(items), tuple(labels)), unknown


def load_mind(
    behaviors_path,
    news_path,
    max_history: int = 50,
    val_fraction: float = 0.2,
    seed: int = 0,
    max_title_len: int = 30,
    max_vocab: int | None = 50000,
) -> Dataset:
    """Load MIND-format logs into per-user stores.

    Both path arguments accept a single path or a list (e.g. the train and
    dev files of MIND-small). Malformed rows and rows naming unknown items
    are skipped and counted in ``Dataset.stats``; duplicate impression ids
    keep the first occurrence.
    """
    corpus, bad_news = load_news(news_path, max_title_len, max_vocab)
    stats = Counter(bad_news_rows=bad_news)
    rows = []
    seen: set[str] = set()
    for line in _read_lines(behaviors_path):
        try:
            imp_id, user, ts, history, imp, unknown = _parse_behavior_row(line, corpus)
        except ValueError:
            stats["malformed_rows"] += 1
            continue
        if unknown:
            stats["unknown_item_rows"] += 1
            continue
        if imp_id in seen:
            stats["duplicate_impressions"] += 1
            continue
        seen.add(imp_id)
        rows.append((ts, imp_id, user, history, imp))
    if stats["malformed_rows"] or stats["unknown_item_rows"]:
        log.warning(
            "skipped %d malformed and %d unknown-item behavior rows",
            stats["malformed_rows"],
            stats["unknown_item_rows"],
        )
    rows.sort(key=lambda r: (r[0], r[1]))
    days = sorted({r[0].date() for r in rows})
    if len(days) >= 2:
        train_day, eval_day = days[-2], days[-1]
    else:
        train_day, eval_day = (days[0] if days else None), None

    rng = np.random.default_rng(seed)
    base: dict[str, list[str]] = {}
    train: dict[str, list[Impression]] = {}
    evals: dict[str, list[Impression]] = {}
    for ts, _, user, history, imp in rows:
        if user not in base:
            base[user] = list(history)
            train[user], evals[user] = [], []
        day = ts.date()
        if day == eval_day:
            evals[user].append(imp)
        elif day == train_day:
            train[user].append(imp)
        else:
            _extend(base[user], imp.positives)

    users: dict[str, UserData] = {}
    for user in base:
        hist = base[user]
        train_hist = tuple(hist[-max_history:]) if max_history else ()
        eval_hist = list(hist)
        for imp in train[user]:
            _extend(eval_hist, imp.positives)
        ud = UserData(user, Behavior(user, train_hist, train[user]), tuple(eval_hist[-max_history:]))
        for imp in evals[user]:
            (ud.valid if rng.random() < val_fraction else ud.test).append(imp)
        users[user] = ud

    stats.update(
        news=len(corpus),
        users=len(users),
        impressions=len(rows),
        days=len(days),
    )
    return Dataset(users, corpus, dict(stats))


def _extend(history: list[str], clicks):
    for c in clicks:
        if c not in history:
            history.append(c)


def adressa_to_mind(clicks_path, out_dir, n_neg: int = 20, seed: int = 0) -> tuple[Path, Path]:
    """Convert a click log (TSV: user, news id, unix time, title) to MIND files.

    Each click becomes one impression with the clicked item and ``n_neg``
    items drawn uniformly from the rest of the catalogue.
    """
    rng = np.random.default_rng(seed)
    clicks, titles = [], {}
    for line in _read_lines(clicks_path):
        parts = line.split("\t")
        if len(parts) < 4:
            continue
        user, nid, ts, title = parts[:4]
        titles.setdefault(nid, title)
        clicks.append((int(float(ts)), user, nid))
    clicks.sort()
    catalogue = sorted(titles)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    news_path, beh_path = out / "news.tsv", out / "behaviors.tsv"
    with open(news_path, "w", encoding="utf-8") as fh:
        for nid in catalogue:
            fh.write(f"{nid}\t-\t-\t{titles[nid]}\t\t\t\t\n")
    history: dict[str, list[str]] = {}
    with open(beh_path, "w", encoding="utf-8") as fh:
        for k, (ts, user, nid) in enumerate(clicks):
            others = [c for c in catalogue if c != nid]
            negs = [others[i] for i in rng.choice(len(others), min(n_neg, len(others)), replace=False)]
            when = datetime.fromtimestamp(ts, timezone.utc).strftime(MIND_TIME)
            cands = " ".join([f"{nid}-1"] + [f"{n}-0" for n in negs])
            hist = " ".join(history.get(user, []))
            fh.write(f"a{k}\t{user}\t{when}\t{hist}\t{cands}\n")
            history.setdefault(user, []).append(nid)
    return beh_path, news_path


# ---------------------------------------------------------------------------
# synthetic worlds


@dataclass
class SyntheticSpec:
    n_users: int = 1000
    n_items: int = 500
    d_latent: int = 4
    clicks_per_user: int = 10
    noise: float = 0.1
    seed: int = 0
    vocab_size: int = 200
    title_len: int = 5
    train_impressions: int = 4
    eval_impressions: int = 2
    impression_size: int = 6

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 2 or self.d_latent < 1:
            raise ConfigError("synthetic spec needs users >= 1, items >= 2, d_latent >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.impression_size < 2:
            raise ConfigError("impression_size must be >= 2")


def load_synthetic_spec(path) -> SyntheticSpec:
    """Read ``key = value`` lines (``#`` comments allowed) into a spec."""
    types = {f.name: f.type for f in fields(SyntheticSpec)}
    kwargs = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise ConfigError(f"{path}: unknown synthetic key {key!r}")
        kwargs[key] = float(val) if types[key] in (float, "float") else int(val)
    return SyntheticSpec(**kwargs)


def click_probability(user_latent, item_latent, noise: float):
    """Logistic link on the latent dot product; ``noise = 0`` is a hard step."""
    dot = np.asarray(user_latent) @ np.asarray(item_latent).T
    if noise == 0:
        return (dot > 0).astype(np.float64)
    return 1.0 / (1.0 + np.exp(-dot / noise))


def draw_labels(p, rng) -> np.ndarray:
    """Independent Bernoulli clicks with probabilities ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return (rng.random(p.shape) < p).astype(int)


@dataclass
class SyntheticWorld:
    dataset: Dataset
    user_latents: np.ndarray
    item_latents: np.ndarray
    token_latents: np.ndarray


def gen_synthetic(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    V = spec.vocab_size
    token_lat = rng.normal(size=(V, spec.d_latent))
    titles = rng.integers(1, V, size=(spec.n_items, spec.title_len))
    item_lat = token_lat[titles].mean(axis=1) * math.sqrt(spec.title_len)
    user_lat = rng.normal(size=(spec.n_users, spec.d_latent))
    vocab = {UNK: 0, **{f"t{j}": j for j in range(1, V)}}
    ids = [f"n{i}" for i in range(spec.n_items)]
    items = {ids[i]: NewsContent(ids[i], tuple(int(t) for t in titles[i])) for i in range(spec.n_items)}

    users: dict[str, UserData] = {}
    for u in range(spec.n_users):
        p = click_probability(user_lat[u], item_lat, spec.noise)
        order = rng.permutation(spec.n_items)
        clicked = order[rng.random(spec.n_items)[order] < p[order]][: spec.clicks_per_user]
        history = tuple(ids[i] for i in clicked)

        def impression(tag):
            for _ in range(50):
                cand = rng.choice(spec.n_items, spec.impression_size, replace=False)
                labels = draw_labels(p[cand], rng)
                if 0 < labels.sum() < labels.size:
                    return Impression(f"{tag}", tuple(ids[i] for i in cand), tuple(int(l) for l in labels))
            return None

        uid = f"u{u}"
        train = [imp for k in range(spec.train_impressions) if (imp := impression(f"{uid}-t{k}"))]
        valid = [imp for k in range(spec.eval_impressions) if (imp := impression(f"{uid}-v{k}"))]
        users[uid] = UserData(uid, Behavior(uid, history, train), history, valid, [])
    stats = dict(news=spec.n_items, users=spec.n_users, synthetic=True)
    return SyntheticWorld(Dataset(users, Corpus(items, vocab), stats), user_lat, item_lat, token_lat)
