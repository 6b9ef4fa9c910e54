"""The frozen base model: a pre-norm Transformer encoder over feature frames
plus a Transformer decoder, trained from scratch on the existing languages and
then frozen forever.

Inputs are precomputed feature frames; the audio frontend is a single linear
projection. The decoder is prompted with [sot, transcribe, notimestamps] and
predicts the language tag first, then the transcript, then eot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, asdict
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .optim import AdamState, TriStageSchedule, adam_step, clip_global_norm, lr_at
from .rng import make_rng
from .tokenizer import BpeVocab, train_bpe, SOT, EOT, PAD, TRANSCRIBE, NOTIMESTAMPS
from .synthdata import Utterance


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, dump: dict):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step
        self.dump = dump


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 40
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 6
    n_dec_layers: int = 2
    ffn_dim: int = 512
    max_frames: int = 2048
    max_text: int = 256
    primary_vocab: int = 0
    secondary_vocab: int = 0
    dropout: float = 0.0
    # secondary (LAS) decoder dims; hidden=512 matches the full-scale setup,
    # the toy default keeps CPU runs short
    las_hidden: int = 128
    las_embed: int = 64
    las_attn_dim: int = 64
    las_heads: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.ffn_dim < self.d_model:
            raise ConfigError("ffn_dim must be >= d_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- weight construction -------------------------------------------------------


def _mat(rng, d_in: int, d_out: int, dtype=np.float32) -> Tensor:
    scale = 1.0 / math.sqrt(d_in)
    return T.parameter(rng.standard_normal((d_in, d_out)) * scale, dtype=dtype)


def init_base_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    if cfg.primary_vocab <= 0:
        raise ConfigError("primary_vocab must be set before building weights")
    rng = make_rng(seed, "base-init")
    p: dict[str, Tensor] = {}
    d, ffn = cfg.d_model, cfg.ffn_dim
    p["enc.in_proj.w"] = _mat(rng, cfg.feat_dim, d, dtype)
    p["enc.in_proj.b"] = T.parameter(np.zeros(d), dtype=dtype)
    for i in range(cfg.n_enc_layers):
        k = f"enc.L{i}"
        p[f"{k}.ln1.g"] = T.parameter(np.ones(d), dtype=dtype)
        p[f"{k}.ln1.b"] = T.parameter(np.zeros(d), dtype=dtype)
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{k}.attn.{m}"] = _mat(rng, d, d, dtype)
        p[f"{k}.ln2.g"] = T.parameter(np.ones(d), dtype=dtype)
        p[f"{k}.ln2.b"] = T.parameter(np.zeros(d), dtype=dtype)
        p[f"{k}.ff.w1"] = _mat(rng, d, ffn, dtype)
        p[f"{k}.ff.w2"] = _mat(rng, ffn, d, dtype)
    p["enc.ln_f.g"] = T.parameter(np.ones(d), dtype=dtype)
    p["enc.ln_f.b"] = T.parameter(np.zeros(d), dtype=dtype)

    V = cfg.primary_vocab
    p["dec.embed"] = T.parameter(rng.standard_normal((V, d)) * 0.02, dtype=dtype)
    p["dec.pos"] = T.parameter(rng.standard_normal((cfg.max_text, d)) * 0.01, dtype=dtype)
    for i in range(cfg.n_dec_layers):
        k = f"dec.L{i}"
        p[f"{k}.ln1.g"] = T.parameter(np.ones(d), dtype=dtype)
        p[f"{k}.ln1.b"] = T.parameter(np.zeros(d), dtype=dtype)
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{k}.self.{m}"] = _mat(rng, d, d, dtype)
        p[f"{k}.ln2.g"] = T.parameter(np.ones(d), dtype=dtype)
        p[f"{k}.ln2.b"] = T.parameter(np.zeros(d), dtype=dtype)
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{k}.cross.{m}"] = _mat(rng, d, d, dtype)
        p[f"{k}.ln3.g"] = T.parameter(np.ones(d), dtype=dtype)
        p[f"{k}.ln3.b"] = T.parameter(np.zeros(d), dtype=dtype)
        p[f"{k}.ff.w1"] = _mat(rng, d, ffn, dtype)
        p[f"{k}.ff.w2"] = _mat(rng, ffn, d, dtype)
    p["dec.ln_f.g"] = T.parameter(np.ones(d), dtype=dtype)
    p["dec.ln_f.b"] = T.parameter(np.zeros(d), dtype=dtype)
    p["dec.out.w"] = _mat(rng, d, V, dtype)
    p["dec.out.b"] = T.parameter(np.zeros(V), dtype=dtype)
    return p


@lru_cache(maxsize=16)
def _sinusoid_tab(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    tab = np.zeros((max_len, d), dtype=np.float64)
    tab[:, 0::2] = np.sin(angle)
    tab[:, 1::2] = np.cos(angle)
    return tab.astype(np.float32)


def sinusoid(n: int, d: int, dtype=np.float32) -> np.ndarray:
    tab = _sinusoid_tab(int(np.ceil(n / 512.0)) * 512, d)
    return tab[:n].astype(dtype, copy=False)


# -- forward pieces (shared with the dual extension) ----------------------------


def linear3(x: Tensor, w: Tensor) -> Tensor:
    """[B, T, d_in] @ [d_in, d_out] via one 2-D GEMM."""
    B, t, d = x.shape
    return T.reshape(T.matmul(T.reshape(x, (B * t, d)), w), (B, t, w.shape[1]))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product multi-head attention over already-projected q/k/v.
    mask is boolean, broadcastable to [B, H, Tq, Tk], True = attendable."""
    B, tq, d = q.shape
    tk = k.shape[1]
    hd = d // n_heads
    qh = T.transpose(T.reshape(q, (B, tq, n_heads, hd)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (B, tk, n_heads, hd)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (B, tk, n_heads, hd)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(qh, kh), 1.0 / math.sqrt(hd))
    w = T.softmax(scores, axis=-1, mask=mask)
    out = T.matmul(w, vh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, tq, d))


def _plain_proj(params: dict[str, Tensor], _adapters, x: Tensor, name: str) -> Tensor:
    return linear3(x, params[name])


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def encoder_layer(params: dict[str, Tensor], key: str, x: Tensor, n_heads: int,
                  mask: np.ndarray | None, proj, dropout: float = 0.0,
                  drop_rng=None) -> Tensor:
    h = T.layer_norm(x, params[f"{key}.ln1.g"], params[f"{key}.ln1.b"])
    q = proj(h, f"{key}.attn.wq")
    k = proj(h, f"{key}.attn.wk")
    v = proj(h, f"{key}.attn.wv")
    a = attention(q, k, v, n_heads, mask)
    x = T.add(x, _dropout(proj(a, f"{key}.attn.wo"), dropout, drop_rng))
    h2 = T.layer_norm(x, params[f"{key}.ln2.g"], params[f"{key}.ln2.b"])
    f = proj(T.gelu(proj(h2, f"{key}.ff.w1")), f"{key}.ff.w2")
    return T.add(x, _dropout(f, dropout, drop_rng))


def encode_layers(params: dict[str, Tensor], cfg: ModelConfig, x: Tensor,
                  mask: np.ndarray | None, start: int, stop: int,
                  proj=None, dropout: float = 0.0, drop_rng=None) -> Tensor:
    if proj is None:
        proj = lambda h, name: _plain_proj(params, None, h, name)
    for i in range(start, stop):
        x = encoder_layer(params, f"enc.L{i}", x, cfg.n_heads, mask, proj,
                          dropout, drop_rng)
    return x


def encoder_input(params: dict[str, Tensor], cfg: ModelConfig, feats) -> Tensor:
    """Input projection plus sinusoidal positions. feats: [T, F] or [B, T, F]."""
    dtype = params["enc.in_proj.w"].data.dtype
    if isinstance(feats, Tensor):
        x = feats
    else:
        x = Tensor(np.asarray(feats, dtype=dtype))
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, t, f = x.shape
    if t == 0:
        raise T.DimensionError("empty feature sequence")
    if t > cfg.max_frames:
        raise T.DimensionError(f"{t} frames exceeds max_frames={cfg.max_frames}")
    if f != cfg.feat_dim:
        raise T.DimensionError(f"feat_dim {f} != config {cfg.feat_dim}")
    h = T.add(linear3(x, params["enc.in_proj.w"]), params["enc.in_proj.b"])
    pe = Tensor(sinusoid(t, cfg.d_model, x.data.dtype)[None, :, :])
    return T.add(h, pe)


def encode_primary(params: dict[str, Tensor], cfg: ModelConfig, feats,
                   frame_mask: np.ndarray | None = None,
                   dropout: float = 0.0, drop_rng=None) -> Tensor:
    """Full primary encoder stack: returns [B, T, d] (or [T, d] for 2-D input)."""
    squeeze = (feats.data if isinstance(feats, Tensor) else np.asarray(feats)).ndim == 2
    x = encoder_input(params, cfg, feats)
    attn_mask = None if frame_mask is None else frame_mask[:, None, None, :]
    x = encode_layers(params, cfg, x, attn_mask, 0, cfg.n_enc_layers,
                      dropout=dropout, drop_rng=drop_rng)
    x = T.layer_norm(x, params["enc.ln_f.g"], params["enc.ln_f.b"])
    return T.reshape(x, x.shape[1:]) if squeeze else x


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))[None, None, :, :]


def decoder_forward(params: dict[str, Tensor], cfg: ModelConfig, enc_out: Tensor,
                    ids: np.ndarray, enc_mask: np.ndarray | None = None,
                    target_mask: np.ndarray | None = None,
                    dropout: float = 0.0, drop_rng=None) -> Tensor:
    """Teacher-forced decoder pass. ids: [B, L] int; returns logits [B, L, V]."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise T.DimensionError("decoder ids must be [B, L]")
    B, L = ids.shape
    if L > cfg.max_text:
        raise T.DimensionError(f"prefix length {L} exceeds max_text={cfg.max_text}")
    if ids.min() < 0 or ids.max() >= cfg.primary_vocab:
        raise T.DimensionError(f"token id out of range [0, {cfg.primary_vocab})")
    x = T.add(T.embedding(params["dec.embed"], ids), params["dec.pos"][0:L])
    self_mask = causal_mask(L)
    if target_mask is not None:
        self_mask = self_mask & target_mask[:, None, None, :]
    cross_mask = None if enc_mask is None else enc_mask[:, None, None, :]
    for i in range(cfg.n_dec_layers):
        k = f"dec.L{i}"
        proj = lambda h, name: _plain_proj(params, None, h, name)
        h = T.layer_norm(x, params[f"{k}.ln1.g"], params[f"{k}.ln1.b"])
        a = attention(proj(h, f"{k}.self.wq"), proj(h, f"{k}.self.wk"),
                      proj(h, f"{k}.self.wv"), cfg.n_heads, self_mask)
        x = T.add(x, _dropout(proj(a, f"{k}.self.wo"), dropout, drop_rng))
        h = T.layer_norm(x, params[f"{k}.ln2.g"], params[f"{k}.ln2.b"])
        c = attention(proj(h, f"{k}.cross.wq"),
                      linear3(enc_out, params[f"{k}.cross.wk"]),
                      linear3(enc_out, params[f"{k}.cross.wv"]),
                      cfg.n_heads, cross_mask)
        x = T.add(x, _dropout(proj(c, f"{k}.cross.wo"), dropout, drop_rng))
        h = T.layer_norm(x, params[f"{k}.ln3.g"], params[f"{k}.ln3.b"])
        f = linear3(T.gelu(linear3(h, params[f"{k}.ff.w1"])), params[f"{k}.ff.w2"])
        x = T.add(x, _dropout(f, dropout, drop_rng))
    x = T.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"])
    return T.add(linear3(x, params["dec.out.w"]), params["dec.out.b"])


def primary_decoder_step(params: dict[str, Tensor], cfg: ModelConfig,
                         enc_out: Tensor, prefix_ids: list[int]) -> np.ndarray:
    """Next-token logits for a single utterance prefix (inference)."""
    ids = np.asarray([prefix_ids], dtype=np.int64)
    enc = enc_out if enc_out.data.ndim == 3 else T.reshape(enc_out, (1,) + enc_out.shape)
    logits = decoder_forward(params, cfg, enc, ids)
    return logits.data[0, -1]


# -- the trained-then-frozen artifact -------------------------------------------


@dataclass
class BaseModel:
    cfg: ModelConfig
    params: dict[str, Tensor]
    vocab: BpeVocab
    digest: str = ""

    def freeze(self) -> str:
        from .checkpoint import digest_of_params
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.digest = digest_of_params(self.params)
        return self.digest

    def verify_digest(self) -> None:
        from .checkpoint import digest_of_params
        if not self.digest:
            raise ConfigError("base model was never frozen")
        actual = digest_of_params(self.params)
        if actual != self.digest:
            raise ConfigError(f"base weights changed: digest {actual[:12]}.. != "
                              f"recorded {self.digest[:12]}..")

    def prompt_ids(self) -> list[int]:
        v = self.vocab
        return [v.special(SOT), v.special(TRANSCRIBE), v.special(NOTIMESTAMPS)]

    def encode(self, feats) -> Tensor:
        return encode_primary(self.params, self.cfg, feats)


def build_target_rows(vocab: BpeVocab, utt: Utterance) -> tuple[list[int], list[int]]:
    """(decoder input ids, per-position target ids) for one utterance.

    Input is [sot, transcribe, notimestamps, tag, text...]; targets are the
    inputs shifted left plus the closing eot. The two prompt-internal
    predictions are not scored (the tag prediction onward is).
    """
    tag_id = vocab.specials.get(f"<|lang:{utt.lang}|>")
    if tag_id is None:
        raise ConfigError(f"language '{utt.lang}' has no tag in this vocab")
    text_ids = vocab.encode(utt.text)
    inputs = [vocab.special(SOT), vocab.special(TRANSCRIBE), vocab.special(NOTIMESTAMPS),
              tag_id] + text_ids
    targets = inputs[1:] + [vocab.special(EOT)]
    ignore = -1
    targets[0] = ignore
    targets[1] = ignore
    return inputs, targets


def make_batch(vocab: BpeVocab, utts: list[Utterance], dtype=np.float32):
    """Pad a batch: features [B,Tmax,F] + frame mask, ids [B,Lmax] + targets."""
    B = len(utts)
    rows = [build_target_rows(vocab, u) for u in utts]
    t_max = max(u.features.shape[0] for u in utts)
    l_max = max(len(r[0]) for r in rows)
    feat_dim = utts[0].features.shape[1]
    feats = np.zeros((B, t_max, feat_dim), dtype=dtype)
    fmask = np.zeros((B, t_max), dtype=bool)
    pad = vocab.special(PAD)
    ids = np.full((B, l_max), pad, dtype=np.int64)
    targets = np.full((B, l_max), -1, dtype=np.int64)
    for b, (u, (inp, tgt)) in enumerate(zip(utts, rows)):
        t = u.features.shape[0]
        feats[b, :t] = u.features
        fmask[b, :t] = True
        ids[b, :len(inp)] = inp
        targets[b, :len(tgt)] = tgt
    return feats, fmask, ids, targets


def batch_loss(params: dict[str, Tensor], cfg: ModelConfig, vocab: BpeVocab,
               utts: list[Utterance], dropout: float = 0.0, drop_rng=None) -> Tensor:
    feats, fmask, ids, targets = make_batch(vocab, utts)
    tmask = ids != vocab.special(PAD)
    enc = encode_primary(params, cfg, Tensor(feats), fmask, dropout, drop_rng)
    logits = decoder_forward(params, cfg, enc, ids, fmask, tmask,
                             dropout=dropout, drop_rng=drop_rng)
    B, L, V = logits.shape
    return T.cross_entropy(T.reshape(logits, (B * L, V)), targets.reshape(-1),
                           ignore_index=-1)


def train_base(cfg: ModelConfig, train_utts: list[Utterance], languages: list[str],
               steps: int, batch_size: int, peak_lr: float, seed: int,
               log_every: int = 50, on_step=None) -> tuple[BaseModel, list[tuple[int, float, float]]]:
    """Train encoder + primary decoder from scratch, then freeze.

    Returns the frozen model and the (step, lr, loss) log. steps == 0 yields
    a frozen randomly-initialized checkpoint.
    """
    if not train_utts:
        raise ConfigError("empty training set")
    corpus = [u.text for u in train_utts]
    vocab = train_bpe(corpus, max(cfg.primary_vocab, 256 + 5 + len(languages)),
                      languages=tuple(languages))
    cfg = replace(cfg, primary_vocab=vocab.size)
    params = init_base_params(cfg, seed)
    sched = TriStageSchedule(peak_lr=peak_lr, total_steps=max(steps, 1))
    state = AdamState()
    order_rng = make_rng(seed, "base-batches")
    drop_rng = make_rng(seed, "base-dropout") if cfg.dropout > 0 else None
    log: list[tuple[int, float, float]] = []
    order: list[int] = []
    losses: list[float] = []
    for step in range(steps):
        if len(order) < batch_size:
            order += list(order_rng.permutation(len(train_utts)))
        batch = [train_utts[i] for i in order[:batch_size]]
        order = order[batch_size:]
        try:
            loss = batch_loss(params, cfg, vocab, batch, cfg.dropout, drop_rng)
        except T.NonFiniteError:
            raise TrainingDiverged(step, {"step": step, "seed": seed,
                                          "recent_losses": losses[-20:]}) from None
        for p in params.values():
            p.grad = None
        loss.backward()
        clip_global_norm(params, 5.0)
        lr = lr_at(sched, step + 1)
        adam_step(params, state, lr)
        losses.append(float(loss.data))
        if step % log_every == 0 or step == steps - 1:
            log.append((step, lr, float(loss.data)))
        if on_step is not None:
            on_step(step, float(loss.data))
    model = BaseModel(cfg=cfg, params=params, vocab=vocab)
    model.freeze()
    return model, log
