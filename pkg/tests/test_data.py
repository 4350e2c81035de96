from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednewsrec.data import (
    Impression,
    SyntheticSpec,
    adressa_to_mind,
    build_samples,
    build_vocab,
    click_probability,
    draw_labels,
    encode_title,
    gen_synthetic,
    load_mind,
    load_synthetic_spec,
    negative_sample,
)
from fednewsrec.errors import ConfigError, InputError

NEWS = [
    "N1\tsports\tsoccer\tBig Match Tonight\tabstract\turl\t[]\t[]",
    "N2\tnews\tus\tstorm hits coast\t\t\t\t",
    "N3\tnews\tworld\tmarkets Rally again\t\t\t\t",
    "N4\tfood\tfood\tten quick dinners\t\t\t\t",
    "N5\tauto\tcars\tnew cars unveiled\t\t\t\t",
]


def write(tmp_path, behaviors, news=NEWS):
    b, n = tmp_path / "behaviors.tsv", tmp_path / "news.tsv"
    b.write_text("\n".join(behaviors) + "\n")
    n.write_text("\n".join(news) + "\n")
    return b, n


def test_two_row_toy_file(tmp_path):
    b, n = write(
        tmp_path,
        [
            "1\tU1\t11/15/2019 8:55:22 AM\tN1 N2\tN3-1 N4-0 N5-0",
            "2\tU2\t11/15/2019 9:01:00 AM\t\tN4-1 N1-0",
        ],
    )
    ds = load_mind(b, n)
    assert list(ds.users) == ["U1", "U2"]
    u1 = ds.users["U1"]
    assert u1.train.history == ("N1", "N2")
    assert u1.train.impressions == [Impression("1", ("N3", "N4", "N5"), (1, 0, 0))]
    assert ds.users["U2"].train.history == ()
    assert ds.users["U2"].train.impressions == [Impression("2", ("N4", "N1"), (1, 0))]
    assert u1.valid == u1.test == []
    assert len(ds.corpus) == 5
    assert ds.corpus.index["N3"] == 2
    assert ds.stats["days"] == 1


def test_vocab_and_titles():
    vocab = build_vocab(["a b b", "B c"], max_size=3)
    assert vocab == {"<unk>": 0, "b": 1, "a": 2}
    assert encode_title("C b A", vocab, 2) == (0, 1)
    assert encode_title("", vocab, 5) == (0,)


def test_malformed_and_unknown_rows_skipped(tmp_path):
    b, n = write(
        tmp_path,
        [
            "1\tU1\t11/15/2019 8:55:22 AM\tN1\tN3-1 N4-0",
            "2\tU1\tnot a time\tN1\tN3-1 N4-0",
            "3\tU1\t11/15/2019 8:55:22 AM\tN1\tN3-7",
            "4\tU1\t11/15/2019 8:55:22 AM\tN1",
            "5\tU1\t11/15/2019 8:55:22 AM\tN99\tN3-1 N4-0",
            "6\tU1\t11/15/2019 8:55:22 AM\tN1\tN3-1 N77-0",
        ],
    )
    ds = load_mind(b, n)
    assert ds.stats["malformed_rows"] == 3
    assert ds.stats["unknown_item_rows"] == 2
    assert [i.id for i in ds.users["U1"].train.impressions] == ["1"]


def test_duplicate_impression_first_wins(tmp_path):
    b, n = write(
        tmp_path,
        [
            "7\tU1\t11/15/2019 8:00:00 AM\t\tN1-1 N2-0",
            "7\tU2\t11/15/2019 7:00:00 AM\t\tN3-1 N4-0",
        ],
    )
    ds = load_mind(b, n)
    assert ds.stats["duplicate_impressions"] == 1
    assert "U2" not in ds.users
    assert ds.users["U1"].train.impressions[0].items == ("N1", "N2")


def test_day_split(tmp_path):
    rows = [
        "1\tU1\t11/13/2019 8:00:00 AM\tN1\tN2-1 N3-0",
        "2\tU1\t11/14/2019 8:00:00 AM\tN1\tN4-1 N5-0",
        "3\tU1\t11/14/2019 9:00:00 AM\tN1\tN3-1 N5-0",
    ]
    rows += [f"{100 + k}\tU1\t11/15/2019 8:{k % 60:02d}:00 AM\tN1\tN5-1 N1-0" for k in range(500)]
    b, n = write(tmp_path, rows)
    ds = load_mind(b, n, seed=3)
    u = ds.users["U1"]
    # earlier days only extend the history; second-to-last day is training
    assert u.train.history == ("N1", "N2")
    assert [i.id for i in u.train.impressions] == ["2", "3"]
    assert u.eval_history == ("N1", "N2", "N4", "N3")
    ids_v, ids_t = {i.id for i in u.valid}, {i.id for i in u.test}
    assert not ids_v & ids_t and len(ids_v) + len(ids_t) == 500
    assert abs(len(ids_v) / 500 - 0.2) < 0.06
    again = load_mind(b, n, seed=3).users["U1"]
    assert [i.id for i in again.valid] == [i.id for i in u.valid]


def test_history_truncated_to_most_recent(tmp_path):
    b, n = write(tmp_path, ["1\tU1\t11/15/2019 8:00:00 AM\tN1 N2 N3 N4\tN5-1 N1-0"])
    assert load_mind(b, n, max_history=2).users["U1"].train.history == ("N3", "N4")


def test_multiple_files(tmp_path):
    b1, n = write(tmp_path, ["1\tU1\t11/14/2019 8:00:00 AM\t\tN1-1 N2-0"])
    b2 = tmp_path / "dev.tsv"
    b2.write_text("2\tU1\t11/15/2019 8:00:00 AM\t\tN3-1 N4-0\n")
    ds = load_mind([b1, b2], n, val_fraction=1.0)
    assert [i.id for i in ds.users["U1"].train.impressions] == ["1"]
    assert [i.id for i in ds.users["U1"].valid] == ["2"]


def test_impression_validation():
    with pytest.raises(InputError):
        Impression("x", ("a", "b"), (1,))
    with pytest.raises(InputError):
        Impression("x", ("a",), (2,))


# ---------------------------------------------------------------------------
# negative sampling


def test_negative_sample_exact_when_k_equals_negatives():
    imp = Impression("i", ("p", "a", "b", "c", "d"), (1, 0, 0, 0, 0))
    (s,) = negative_sample(imp, 4, rng=0)
    assert s.candidates[0] == "p" and s.label_index == 0
    assert sorted(s.candidates[1:]) == ["a", "b", "c", "d"]


def test_two_positives_two_samples():
    imp = Impression("i", ("p", "a", "q", "b"), (1, 0, 1, 0))
    out = negative_sample(imp, 2, rng=0, history=("h",))
    assert [s.candidates[0] for s in out] == ["p", "q"]
    assert all(s.history == ("h",) for s in out)


def test_too_few_negatives_resampled_with_replacement():
    imp = Impression("i", ("p", "a", "b"), (1, 0, 0))
    (s,) = negative_sample(imp, 4, rng=1)
    assert len(s.candidates) == 5
    assert set(s.candidates[1:]) <= {"a", "b"}


def test_no_negatives_skipped():
    assert negative_sample(Impression("i", ("p", "q"), (1, 1)), 4, rng=0) == []


@settings(max_examples=60)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(1, 6), st.integers(0, 1000))
def test_negative_sample_properties(labels, K, seed):
    items = tuple(f"n{i}" for i in range(len(labels)))
    imp = Impression("i", items, tuple(int(l) for l in labels))
    out = negative_sample(imp, K, rng=seed)
    negs = set(imp.negatives)
    if not negs:
        assert out == []
        return
    assert len(out) == len(imp.positives)
    for s, pos in zip(out, imp.positives):
        assert s.candidates[0] == pos and len(s.candidates) == K + 1
        assert set(s.candidates[1:]) <= negs
        if len(negs) >= K:
            assert len(set(s.candidates[1:])) == K


def test_build_samples_deterministic():
    ds = gen_synthetic(SyntheticSpec(n_users=3, n_items=20, seed=1)).dataset
    beh = ds.users["u0"].train
    assert build_samples(beh, 4, 5) == build_samples(beh, 4, 5)


# ---------------------------------------------------------------------------
# synthetic worlds


def test_synthetic_same_seed_identical():
    a = gen_synthetic(SyntheticSpec(n_users=20, n_items=50, seed=4))
    b = gen_synthetic(SyntheticSpec(n_users=20, n_items=50, seed=4))
    assert np.array_equal(a.user_latents, b.user_latents)
    assert a.dataset.users == b.dataset.users
    assert a.dataset.corpus.items == b.dataset.corpus.items


def test_noise_zero_one_dim_is_separable():
    w = gen_synthetic(SyntheticSpec(n_users=30, n_items=40, d_latent=1, noise=0.0, seed=2))
    ids = w.dataset.corpus.index
    for k, u in enumerate(w.dataset.users.values()):
        for imp in u.train.impressions + u.valid:
            for nid, lab in zip(imp.items, imp.labels):
                assert lab == int(w.user_latents[k, 0] * w.item_latents[ids[nid], 0] > 0)
        for nid in u.train.history:
            assert w.user_latents[k, 0] * w.item_latents[ids[nid], 0] > 0


def test_logistic_click_rate_matches_probability():
    rng = np.random.default_rng(0)
    users, items = rng.normal(size=(100_000, 3)), rng.normal(size=(100_000, 3))
    p = np.array([click_probability(u, i, 0.7) for u, i in zip(users[:10], items[:10])])
    assert np.all((p > 0) & (p < 1))
    p = 1.0 / (1.0 + np.exp(-(users * items).sum(1) / 0.7))
    labels = draw_labels(p, rng)
    assert abs(labels.mean() - p.mean()) <= 0.02
    # also within probability bins
    for lo in np.arange(0, 1, 0.2):
        sel = (p >= lo) & (p < lo + 0.2)
        assert abs(labels[sel].mean() - p[sel].mean()) <= 0.02


def test_synthetic_impressions_have_both_labels():
    ds = gen_synthetic(SyntheticSpec(n_users=30, n_items=60, seed=3)).dataset
    for u in ds.users.values():
        for imp in u.train.impressions + u.valid:
            assert 0 < sum(imp.labels) < len(imp.labels)
            assert all(nid in ds.corpus for nid in imp.items)


def test_synthetic_spec_file(tmp_path):
    f = tmp_path / "spec.cfg"
    f.write_text("# world\nn_users = 7\nnoise=0.25  # logistic\nseed = 9\n")
    spec = load_synthetic_spec(f)
    assert (spec.n_users, spec.noise, spec.seed, spec.n_items) == (7, 0.25, 9, 500)
    f.write_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        load_synthetic_spec(f)
    with pytest.raises(ConfigError):
        SyntheticSpec(noise=-1)


# ---------------------------------------------------------------------------
# click-log conversion


def test_adressa_conversion_resamples_negatives(tmp_path):
    log = tmp_path / "clicks.tsv"
    lines = [f"u{k % 3}\ta{k % 30}\t{1_500_000_000 + 3600 * k}\ttitle {k % 30}" for k in range(60)]
    log.write_text("\n".join(lines) + "\n")
    b, n = adressa_to_mind(log, tmp_path / "out", n_neg=20, seed=1)
    ds = load_mind(b, n, val_fraction=0.0)
    imps = [i for u in ds.users.values() for i in u.train.impressions + u.test]
    assert imps
    for imp in imps:
        assert Counter(imp.labels) == Counter({0: 20, 1: 1})
        assert len(set(imp.items)) == 21
    b2, _ = adressa_to_mind(log, tmp_path / "again", n_neg=20, seed=1)
    assert b.read_text() == b2.read_text()
