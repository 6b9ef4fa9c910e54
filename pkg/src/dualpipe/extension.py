"""The dual-pipeline extension: a LoRA-augmented secondary encoder stream
forking from a configurable start layer, with its own residual accumulation
and final layer norm, feeding an LSTM/additive-attention (LAS) secondary
decoder.

The primary stream is untouched by construction: it runs the same frozen ops
as the base encoder, so its output is identical for any adapter state, and
no gradient is ever computed for a frozen matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .basemodel import (BaseModel, ModelConfig, ConfigError, encoder_input,
                        encode_layers)
from .rng import make_rng
from .tokenizer import BpeVocab, SOT

# The matrices inside each encoder layer that receive adapters.
TARGETED = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.w1", "ff.w2")


@dataclass
class LoraAdapter:
    """Trainable low-rank pair beside one frozen matrix.

    Stored input-major like the frozen weights: a is [d_in, r], b is
    [r, d_out]. b starts at zero so the adapter contributes nothing until
    trained; rank 0 means the adapter does not exist at all.
    """
    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 0:
            raise ConfigError("rank must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")


def init_adapter(rng, d_in: int, d_out: int, rank: int, alpha: float,
                 dtype=np.float32) -> LoraAdapter:
    a = T.parameter(rng.standard_normal((d_in, rank)) / math.sqrt(d_in), dtype=dtype)
    b = T.parameter(np.zeros((rank, d_out)), dtype=dtype)
    return LoraAdapter(a=a, b=b, rank=rank, alpha=alpha)


def las_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, e, a, heads = (cfg.d_model, cfg.las_hidden, cfg.las_embed,
                         cfg.las_attn_dim, cfg.las_heads)
    V = cfg.secondary_vocab
    ctx = heads * d
    return {
        "las.embed": (V, e),
        "las.lstm.wx": (e + ctx, 4 * h),
        "las.lstm.wh": (h, 4 * h),
        "las.lstm.b": (4 * h,),
        "las.attn.w_enc": (heads, d, a),
        "las.attn.w_dec": (heads, h, a),
        "las.attn.v": (heads, a),
        "las.out.w": (h + ctx, V),
        "las.out.b": (V,),
    }


def init_las_params(cfg: ModelConfig, rng, dtype=np.float32) -> dict[str, Tensor]:
    shapes = las_param_shapes(cfg)
    p: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name == "las.embed":
            w = rng.standard_normal(shape) * 0.02
        elif name.endswith(".b") or name == "las.lstm.b":
            w = np.zeros(shape)
        elif name == "las.attn.v":
            w = rng.standard_normal(shape) / math.sqrt(shape[-1])
        else:
            w = rng.standard_normal(shape) / math.sqrt(shape[-2])
        p[name] = T.parameter(w, dtype=dtype)
    return p


@dataclass
class DualPipelineModel:
    """Frozen base + adapters + secondary final layer norm + LAS decoder."""
    base: BaseModel
    sec_vocab: BpeVocab
    start_layer: int
    rank: int
    alpha: float
    adapters: dict[str, LoraAdapter]
    sec_params: dict[str, Tensor]     # sec.ln_f.* plus las.*

    @property
    def cfg(self) -> ModelConfig:
        return self.base.cfg

    def trainable_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, ad in self.adapters.items():
            out[f"lora.{name}.a"] = ad.a
            out[f"lora.{name}.b"] = ad.b
        out.update(self.sec_params)
        return out

    def sec_prompt_id(self) -> int:
        return self.sec_vocab.special(SOT)

    def tag_ids(self) -> dict[str, int]:
        return self.sec_vocab.lang_tag_ids()


def build_extension(base: BaseModel, sec_vocab: BpeVocab, rank: int, alpha: float,
                    start_layer: int, seed: int, dtype=np.float32) -> DualPipelineModel:
    cfg = base.cfg
    if not (0 <= start_layer <= cfg.n_enc_layers):
        raise ConfigError(f"start_layer {start_layer} outside [0, {cfg.n_enc_layers}]")
    if rank < 0:
        raise ConfigError("rank must be >= 0")
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "secondary_vocab": sec_vocab.size})
    base = BaseModel(cfg=cfg, params=base.params, vocab=base.vocab, digest=base.digest)
    rng = make_rng(seed, "extension-init")
    adapters: dict[str, LoraAdapter] = {}
    if rank > 0:
        d, ffn = cfg.d_model, cfg.ffn_dim
        dims = {"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d),
                "attn.wo": (d, d), "ff.w1": (d, ffn), "ff.w2": (ffn, d)}
        for i in range(start_layer, cfg.n_enc_layers):
            for m in TARGETED:
                d_in, d_out = dims[m]
                adapters[f"enc.L{i}.{m}"] = init_adapter(rng, d_in, d_out, rank, alpha, dtype)
    sec_params = {
        "sec.ln_f.g": T.parameter(base.params["enc.ln_f.g"].data.copy(), dtype=dtype),
        "sec.ln_f.b": T.parameter(base.params["enc.ln_f.b"].data.copy(), dtype=dtype),
    }
    sec_params.update(init_las_params(cfg, rng, dtype))
    return DualPipelineModel(base=base, sec_vocab=sec_vocab, start_layer=start_layer,
                             rank=rank, alpha=alpha, adapters=adapters,
                             sec_params=sec_params)


# -- dual-stream encoder ---------------------------------------------------------


def _lora_proj(model: DualPipelineModel):
    params = model.base.params
    adapters = model.adapters

    def proj(x: Tensor, name: str) -> Tensor:
        B, t, d = x.shape
        flat = T.reshape(x, (B * t, d))
        y = T.lora_linear(flat, params[name], adapters.get(name))
        return T.reshape(y, (B, t, y.shape[-1]))

    return proj


def encode_shared(model: DualPipelineModel, feats, frame_mask=None) -> Tensor:
    """Input projection plus the layers below the fork (both streams share it)."""
    cfg = model.cfg
    x = encoder_input(model.base.params, cfg, feats)
    mask = None if frame_mask is None else frame_mask[:, None, None, :]
    return encode_layers(model.base.params, cfg, x, mask, 0, model.start_layer)


def encode_secondary_from(model: DualPipelineModel, shared: Tensor,
                          frame_mask=None) -> Tensor:
    """Secondary stream from the fork point: LoRA projections, own residuals,
    own final layer norm."""
    cfg = model.cfg
    mask = None if frame_mask is None else frame_mask[:, None, None, :]
    x = encode_layers(model.base.params, cfg, shared, mask,
                      model.start_layer, cfg.n_enc_layers, proj=_lora_proj(model))
    return T.layer_norm(x, model.sec_params["sec.ln_f.g"], model.sec_params["sec.ln_f.b"])


def encode_dual(model: DualPipelineModel, feats, frame_mask=None) -> tuple[Tensor, Tensor]:
    """Run both streams; layers below start_layer are computed once.

    The primary result is identical to the base encoder run on the same
    input: the shared prefix plus the frozen suffix is the exact op sequence
    of encode_primary.
    """
    cfg = model.cfg
    arr = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    squeeze = arr.ndim == 2
    shared = encode_shared(model, feats, frame_mask)
    mask = None if frame_mask is None else frame_mask[:, None, None, :]
    prim = encode_layers(model.base.params, cfg, shared, mask,
                         model.start_layer, cfg.n_enc_layers)
    prim = T.layer_norm(prim, model.base.params["enc.ln_f.g"], model.base.params["enc.ln_f.b"])
    sec = encode_secondary_from(model, shared, frame_mask)
    if squeeze:
        prim = T.reshape(prim, prim.shape[1:])
        sec = T.reshape(sec, sec.shape[1:])
    return prim, sec


# -- LAS decoder -----------------------------------------------------------------


@dataclass
class LasState:
    h: Tensor
    c: Tensor


def las_init_state(model: DualPipelineModel, batch: int, dtype=np.float32) -> LasState:
    hid = model.cfg.las_hidden
    return LasState(h=Tensor(np.zeros((batch, hid), dtype=dtype)),
                    c=Tensor(np.zeros((batch, hid), dtype=dtype)))


def las_enc_proj(model: DualPipelineModel, enc_out: Tensor) -> Tensor:
    """Precompute W_enc . enc_i for all frames and heads: [heads, B, T, a]."""
    w_enc = model.sec_params["las.attn.w_enc"]
    return T.matmul(enc_out[None], w_enc[:, None])


def las_step(model: DualPipelineModel, enc_out: Tensor, prev_tokens: np.ndarray,
             state: LasState, frame_mask: np.ndarray | None = None,
             enc_proj: Tensor | None = None) -> tuple[Tensor, LasState, np.ndarray]:
    """One decoder step for a batch.

    Per head: e_i = v . tanh(W_enc enc_i + W_dec h_prev); attention softmaxes
    e over frames; the contexts of all heads are concatenated. The LSTM
    consumes [embed(prev); context] and the output layer sees
    [new_state; context]. Returns (logits [B, V], state, attention [heads, B, T]).
    """
    if enc_out.data.ndim != 3:
        raise T.DimensionError("las_step expects batched encoder output [B, T, d]")
    B, t, d = enc_out.shape
    if t == 0:
        raise T.DimensionError("empty encoder output")
    p = model.sec_params
    heads = model.cfg.las_heads
    hid = model.cfg.las_hidden
    if state.h.shape != (B, hid):
        raise T.DimensionError(f"state shape {state.h.shape} != ({B}, {hid})")
    if enc_proj is None:
        enc_proj = las_enc_proj(model, enc_out)

    dec_proj = T.matmul(state.h, p["las.attn.w_dec"])                     # [heads,B,a]
    act = T.tanh(T.add(enc_proj, dec_proj[:, :, None, :]))                # [heads,B,T,a]
    scores = T.tsum(T.mul(act, p["las.attn.v"][:, None, None, :]), axis=-1)
    mask = None if frame_mask is None else frame_mask[None, :, :]
    attn = T.softmax(scores, axis=-1, mask=mask)                          # [heads,B,T]
    ctx = T.matmul(T.reshape(attn, (heads, B, 1, t)), enc_out[None])      # [heads,B,1,d]
    ctx = T.reshape(T.transpose(ctx, (1, 2, 0, 3)), (B, heads * d))

    emb = T.embedding(p["las.embed"], np.asarray(prev_tokens))
    x = T.concat([emb, ctx], axis=-1)
    z = T.add(T.add(T.matmul(x, p["las.lstm.wx"]), T.matmul(state.h, p["las.lstm.wh"])),
              p["las.lstm.b"])
    i_g = T.sigmoid(z[:, 0 * hid:1 * hid])
    f_g = T.sigmoid(z[:, 1 * hid:2 * hid])
    g_g = T.tanh(z[:, 2 * hid:3 * hid])
    o_g = T.sigmoid(z[:, 3 * hid:4 * hid])
    c_new = T.add(T.mul(f_g, state.c), T.mul(i_g, g_g))
    h_new = T.mul(o_g, T.tanh(c_new))
    out_in = T.concat([h_new, ctx], axis=-1)
    logits = T.add(T.matmul(out_in, p["las.out.w"]), p["las.out.b"])
    return logits, LasState(h=h_new, c=c_new), attn.data


def secondary_sequence_logits(model: DualPipelineModel, sec_out: Tensor,
                              input_ids: np.ndarray, frame_mask=None) -> Tensor:
    """Teacher-forced logits [B, L, V] for padded input ids [B, L]."""
    B, L = input_ids.shape
    state = las_init_state(model, B, sec_out.data.dtype)
    enc_proj = las_enc_proj(model, sec_out)
    steps = []
    for j in range(L):
        logits, state, _ = las_step(model, sec_out, input_ids[:, j], state,
                                    frame_mask, enc_proj)
        steps.append(T.reshape(logits, (B, 1, logits.shape[-1])))
    return T.concat(steps, axis=1)


def secondary_teacher_forced_loss(model: DualPipelineModel, features,
                                  target_ids: list[int]) -> Tensor:
    """Mean cross entropy of one utterance's [tag, text..., eot] target."""
    if not target_ids:
        raise ConfigError("empty target")
    if target_ids[0] not in set(model.tag_ids().values()):
        raise ConfigError(f"target must start with a registered language tag, "
                          f"got id {target_ids[0]}")
    shared = encode_shared(model, features)
    sec = encode_secondary_from(model, shared)
    inputs = np.asarray([[model.sec_prompt_id()] + list(target_ids[:-1])])
    logits = secondary_sequence_logits(model, sec, inputs)
    flat = T.reshape(logits, (inputs.shape[1], model.cfg.secondary_vocab))
    return T.cross_entropy(flat, np.asarray(target_ids), ignore_index=-1)


def secondary_batch_loss(model: DualPipelineModel, sec_out: Tensor,
                         input_ids: np.ndarray, target_ids: np.ndarray,
                         frame_mask=None) -> Tensor:
    logits = secondary_sequence_logits(model, sec_out, input_ids, frame_mask)
    B, L, V = logits.shape
    return T.cross_entropy(T.reshape(logits, (B * L, V)), target_ids.reshape(-1),
                           ignore_index=-1)


# -- bookkeeping -------------------------------------------------------------------


def count_additional_params(cfg: ModelConfig, rank: int, start_layer: int) -> dict[str, int]:
    """Extra parameters introduced by the extension.

    LoRA cost per targeted matrix is rank * (d_in + d_out); matrices in
    layers below the fork carry no adapters, so the total is non-increasing
    in start_layer and linear in rank.
    """
    if not (0 <= start_layer <= cfg.n_enc_layers):
        raise ConfigError(f"start_layer {start_layer} outside [0, {cfg.n_enc_layers}]")
    d, ffn = cfg.d_model, cfg.ffn_dim
    per_layer = rank * (4 * (d + d) + 2 * (d + ffn))
    lora = (cfg.n_enc_layers - start_layer) * per_layer
    decoder = sum(int(np.prod(s)) for s in las_param_shapes(cfg).values())
    layernorm = 2 * d
    return {"lora": lora, "decoder": decoder, "layernorm": layernorm,
            "total": lora + decoder + layernorm}
