import itertools

import numpy as np
import pytest

from dualpipe.rng import make_rng
from dualpipe.synthdata import (DUR_MAX, DUR_MIN, SynthDataError, SynthParams,
                                gen_dataset, gen_language, inventory_overlap,
                                read_features, render, write_features)


PARAMS = SynthParams(feat_dim=12, n_chars=10, n_words=15, noise_sigma=0.2)


def test_same_seed_same_language():
    a = gen_language(42, PARAMS)
    b = gen_language(42, PARAMS)
    assert a.words == b.words
    assert a.alphabet == b.alphabet
    np.testing.assert_array_equal(a.prototypes, b.prototypes)


def test_seeds_one_to_six_overlap_bounded():
    langs = [gen_language(s, SynthParams(n_chars=16)) for s in range(1, 7)]
    for a, b in itertools.combinations(langs, 2):
        assert inventory_overlap(a, b) <= 0.20


def test_zero_words_rejected():
    with pytest.raises(SynthDataError):
        gen_language(1, SynthParams(n_words=0))


def test_inventory_exhaustion():
    with pytest.raises(SynthDataError, match="exhaust"):
        gen_language(1, SynthParams(n_chars=10_000))


def test_render_sigma_zero_is_deterministic():
    lang = gen_language(7, SynthParams(feat_dim=8, n_chars=6, n_words=5, noise_sigma=0.0))
    text = lang.words[0] + " " + lang.words[1]
    f1 = render(lang, text, make_rng(1, "a"))
    f2 = render(lang, text, make_rng(2, "b"))
    np.testing.assert_array_equal(f1, f2)


def test_frames_match_durations():
    lang = gen_language(9, PARAMS)
    text = lang.words[0]
    feats = render(lang, text, make_rng(0))
    assert DUR_MIN * len(text) <= feats.shape[0] <= DUR_MAX * len(text)
    assert np.all(np.isfinite(feats))


def test_dataset_splits_disjoint_and_deterministic():
    lang = gen_language(11, PARAMS)
    ds1 = gen_dataset(lang, 30, split_seed=5)
    ds2 = gen_dataset(lang, 30, split_seed=5)
    ids = lambda us: {u.utt_id for u in us}
    assert ids(ds1.train) == ids(ds2.train)
    assert not (ids(ds1.train) & ids(ds1.test))
    assert not (ids(ds1.train) & ids(ds1.dev))
    assert len(ds1.all_utts()) == 30
    for u1, u2 in zip(ds1.train, ds2.train):
        assert u1.text == u2.text
        np.testing.assert_array_equal(u1.features, u2.features)


def test_dataset_too_small():
    lang = gen_language(12, PARAMS)
    with pytest.raises(SynthDataError):
        gen_dataset(lang, 2, split_seed=0)


def test_texts_tokenizer_roundtrip():
    from dualpipe.tokenizer import train_bpe
    lang = gen_language(13, PARAMS)
    ds = gen_dataset(lang, 12, split_seed=1)
    texts = [u.text for u in ds.all_utts()]
    v = train_bpe(texts, vocab_size=400)
    for t in texts:
        assert v.decode(v.encode(t)) == t


def test_feature_file_roundtrip(tmp_path):
    lang = gen_language(14, PARAMS)
    feats = render(lang, lang.words[0], make_rng(3))
    path = str(tmp_path / "x.fea")
    write_features(path, feats)
    back = read_features(path)
    np.testing.assert_array_equal(back, feats)


def test_feature_file_bad_magic(tmp_path):
    path = str(tmp_path / "bad.fea")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 16)
    with pytest.raises(SynthDataError):
        read_features(path)
