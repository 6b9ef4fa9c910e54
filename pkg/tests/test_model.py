"""Base-model contracts: shapes, reference forward computation, freezing."""

import numpy as np
import pytest

from dualpipe import tensor as T
from dualpipe.basemodel import (ModelConfig, ConfigError, batch_loss,
                                build_target_rows, decoder_forward,
                                encode_primary, init_base_params,
                                primary_decoder_step, sinusoid, train_base)
from dualpipe.checkpoint import digest_of_params
from dualpipe.synthdata import SynthParams, Utterance, gen_dataset, gen_language
from dualpipe.tokenizer import train_bpe


CFG = ModelConfig(feat_dim=6, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1,
                  ffn_dim=16, primary_vocab=280, max_frames=512)


@pytest.fixture(scope="module")
def params():
    return init_base_params(CFG, seed=3)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=32, ffn_dim=16)


def test_encoder_output_shape(params):
    feats = np.zeros((5, 6), dtype=np.float32)
    out = encode_primary(params, CFG, feats)
    assert out.shape == (5, 8)
    batched = encode_primary(params, CFG, np.zeros((3, 5, 6), dtype=np.float32))
    assert batched.shape == (3, 5, 8)


def test_encoder_rejects_empty_and_overlong(params):
    with pytest.raises(T.DimensionError):
        encode_primary(params, CFG, np.zeros((0, 6), dtype=np.float32))
    with pytest.raises(T.DimensionError):
        encode_primary(params, CFG, np.zeros((513, 6), dtype=np.float32))


def _ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _ref_gelu(x):
    from scipy.special import erf
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _ref_encoder(p, cfg, feats):
    """Independent numpy re-statement of the encoder definition."""
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    x = feats @ p["enc.in_proj.w"].data + p["enc.in_proj.b"].data
    x = x + sinusoid(feats.shape[0], d)
    for i in range(cfg.n_enc_layers):
        k = f"enc.L{i}"
        h = _ref_layer_norm(x, p[f"{k}.ln1.g"].data, p[f"{k}.ln1.b"].data)
        q = h @ p[f"{k}.attn.wq"].data
        ky = h @ p[f"{k}.attn.wk"].data
        v = h @ p[f"{k}.attn.wv"].data
        outs = []
        for hh in range(H):
            sl = slice(hh * hd, (hh + 1) * hd)
            s = (q[:, sl] @ ky[:, sl].T) / np.sqrt(hd)
            s = s - s.max(-1, keepdims=True)
            w = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
            outs.append(w @ v[:, sl])
        x = x + np.concatenate(outs, axis=-1) @ p[f"{k}.attn.wo"].data
        h2 = _ref_layer_norm(x, p[f"{k}.ln2.g"].data, p[f"{k}.ln2.b"].data)
        x = x + _ref_gelu(h2 @ p[f"{k}.ff.w1"].data) @ p[f"{k}.ff.w2"].data
    return _ref_layer_norm(x, p["enc.ln_f.g"].data, p["enc.ln_f.b"].data)


def test_encoder_matches_reference(params):
    rng = np.random.Generator(np.random.Philox(5))
    feats = rng.standard_normal((7, 6)).astype(np.float32)
    ref = _ref_encoder(params, CFG, feats)
    out = encode_primary(params, CFG, feats).data
    np.testing.assert_allclose(out, ref, rtol=2e-5, atol=2e-5)


def test_single_frame_matches_reference(params):
    feats = np.ones((1, 6), dtype=np.float32)
    np.testing.assert_allclose(encode_primary(params, CFG, feats).data,
                               _ref_encoder(params, CFG, feats),
                               rtol=2e-5, atol=2e-5)


def test_decoder_logits_shape_and_determinism(params):
    rng = np.random.Generator(np.random.Philox(6))
    enc = T.Tensor(rng.standard_normal((1, 5, 8)).astype(np.float32))
    prefix = [256, 259, 260]
    l1 = primary_decoder_step(params, CFG, enc, prefix)
    l2 = primary_decoder_step(params, CFG, enc, prefix)
    assert l1.shape == (CFG.primary_vocab,)
    assert np.array_equal(l1, l2)


def test_decoder_rejects_out_of_vocab(params):
    enc = T.Tensor(np.zeros((1, 4, 8), dtype=np.float32))
    with pytest.raises(T.DimensionError):
        primary_decoder_step(params, CFG, enc, [0, CFG.primary_vocab])


def test_causal_masking(params):
    # logits at position j must not depend on tokens after j
    rng = np.random.Generator(np.random.Philox(7))
    enc = T.Tensor(rng.standard_normal((1, 4, 8)).astype(np.float32))
    ids_a = np.array([[1, 2, 3, 4]])
    ids_b = np.array([[1, 2, 9, 9]])
    la = decoder_forward(params, CFG, enc, ids_a).data
    lb = decoder_forward(params, CFG, enc, ids_b).data
    np.testing.assert_array_equal(la[0, :2], lb[0, :2])
    assert not np.array_equal(la[0, 2:], lb[0, 2:])


@pytest.fixture(scope="module")
def tiny_task():
    lang = gen_language(21, SynthParams(feat_dim=6, n_chars=6, n_words=8,
                                        noise_sigma=0.05))
    ds = gen_dataset(lang, 12, split_seed=0)
    return lang, ds


def test_overfit_single_utterance(tiny_task):
    lang, ds = tiny_task
    utt = ds.train[0]
    cfg = ModelConfig(feat_dim=6, d_model=16, n_heads=2, n_enc_layers=2,
                      n_dec_layers=1, ffn_dim=32, primary_vocab=280, max_frames=512)
    model, log = train_base(cfg, [utt], [lang.name], steps=200, batch_size=1,
                            peak_lr=1e-2, seed=1)
    loss = batch_loss(model.params, model.cfg, model.vocab, [utt])
    assert float(loss.data) < 0.01


def test_zero_steps_gives_random_frozen_model(tiny_task):
    lang, ds = tiny_task
    model, log = train_base(CFG, ds.train, [lang.name], steps=0, batch_size=2,
                            peak_lr=1e-3, seed=1)
    assert log == []
    assert model.digest
    model.verify_digest()


def test_freeze_digest_detects_tampering(tiny_task):
    lang, ds = tiny_task
    model, _ = train_base(CFG, ds.train, [lang.name], steps=1, batch_size=2,
                          peak_lr=1e-3, seed=1)
    model.verify_digest()
    model.params["enc.ln_f.g"].data[0] += 1.0
    with pytest.raises(ConfigError, match="changed"):
        model.verify_digest()


def test_target_rows_structure(tiny_task):
    lang, ds = tiny_task
    model, _ = train_base(CFG, ds.train, [lang.name], steps=0, batch_size=1,
                          peak_lr=1e-3, seed=1)
    v = model.vocab
    utt = ds.train[0]
    inputs, targets = build_target_rows(v, utt)
    assert inputs[:3] == model.prompt_ids()
    assert targets[0] == targets[1] == -1
    assert targets[2] == v.special(f"<|lang:{lang.name}|>")
    assert targets[-1] == v.special("<|eot|>")
    assert v.decode([i for i in inputs[4:]]) == utt.text


def test_unregistered_language_rejected(tiny_task):
    lang, ds = tiny_task
    model, _ = train_base(CFG, ds.train, [lang.name], steps=0, batch_size=1,
                          peak_lr=1e-3, seed=1)
    bad = Utterance(utt_id="x", lang="nosuch", text="a", features=ds.train[0].features)
    with pytest.raises(ConfigError, match="nosuch"):
        build_target_rows(model.vocab, bad)
