"""Builders for the finite-difference verification suite: a complete
dual-pipeline model at tiny dimensions, entirely in float64."""

from __future__ import annotations

import numpy as np

from .basemodel import BaseModel, ModelConfig, init_base_params
from .extension import DualPipelineModel, build_extension
from .tokenizer import train_bpe


def build_tiny_extension_f64(seed: int = 5) -> DualPipelineModel:
    """Random frozen base + extension, sized so exhaustive FD stays cheap.

    Zero-initialized trainable tensors (the LoRA B matrices, biases, the
    layer-norm shift) are nudged off zero so their gradients are exercised at
    a generic point.
    """
    cfg = ModelConfig(feat_dim=3, d_model=4, n_heads=2, n_enc_layers=2,
                      n_dec_layers=1, ffn_dim=4, primary_vocab=262, max_frames=64,
                      las_hidden=5, las_embed=3, las_attn_dim=3, las_heads=2)
    vocab = train_bpe(["ab ba"], vocab_size=262, languages=("e",))
    params = init_base_params(cfg, seed, dtype=np.float64)
    for p in params.values():
        p.requires_grad = False
    base = BaseModel(cfg=cfg, params=params, vocab=vocab, digest="fd-suite")
    sec_vocab = train_bpe(["cd dc", "cc dd"], vocab_size=263, languages=("n",))
    model = build_extension(base, sec_vocab, rank=2, alpha=4.0, start_layer=1,
                            seed=seed, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    for name, t in model.trainable_params().items():
        if name.endswith(".b") and t.data.sum() == 0.0:
            t.data = t.data + rng.standard_normal(t.shape) * 0.2
    return model
