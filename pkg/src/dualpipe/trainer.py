"""Extension fine-tuning: updates only the adapters, the secondary final
layer norm, and the secondary decoder, on pooled new-language data.

The frozen part of the network below the fork layer is constant during
training, so its activations are computed once per utterance and cached;
batches are assembled by padding those cached activations.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .basemodel import BaseModel, ConfigError, TrainingDiverged
from .extension import (DualPipelineModel, build_extension, encode_shared,
                        encode_secondary_from, secondary_batch_loss)
from .optim import AdamState, TriStageSchedule, adam_step, clip_global_norm, lr_at
from .rng import make_rng
from .synthdata import Utterance
from .tokenizer import EOT, PAD, SOT, train_bpe


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    peak_lr: float = 3e-4
    alpha: float = 4.0
    rank: int = 8
    start_layer: int = 0
    seed: int = 0
    checkpoint_every: int = 0
    sec_vocab_size: int = 2000
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def build_secondary_rows(model: DualPipelineModel, utt: Utterance) -> tuple[list[int], list[int]]:
    """(decoder inputs, targets) = ([sot, tag, text...], [tag, text..., eot])."""
    v = model.sec_vocab
    tags = model.tag_ids()
    if utt.lang not in tags:
        raise ConfigError(f"language '{utt.lang}' not registered in secondary vocab")
    text_ids = v.encode(utt.text)
    target = [tags[utt.lang]] + text_ids + [v.special(EOT)]
    inputs = [v.special(SOT)] + target[:-1]
    return inputs, target


def precompute_shared(model: DualPipelineModel, utts: list[Utterance]) -> dict[str, np.ndarray]:
    """Activations at the fork layer, per utterance, computed without a tape."""
    cache: dict[str, np.ndarray] = {}
    for u in utts:
        shared = encode_shared(model, u.features)
        cache[u.utt_id] = shared.data[0]
    return cache


def _assemble(model: DualPipelineModel, batch: list[Utterance],
              shared: dict[str, np.ndarray]):
    B = len(batch)
    d = model.cfg.d_model
    rows = [build_secondary_rows(model, u) for u in batch]
    t_max = max(shared[u.utt_id].shape[0] for u in batch)
    l_max = max(len(r[0]) for r in rows)
    x = np.zeros((B, t_max, d), dtype=np.float32)
    fmask = np.zeros((B, t_max), dtype=bool)
    pad = model.sec_vocab.special(PAD)
    ids = np.full((B, l_max), pad, dtype=np.int64)
    targets = np.full((B, l_max), -1, dtype=np.int64)
    for b, (u, (inp, tgt)) in enumerate(zip(batch, rows)):
        t = shared[u.utt_id].shape[0]
        x[b, :t] = shared[u.utt_id]
        fmask[b, :t] = True
        ids[b, :len(inp)] = inp
        targets[b, :len(tgt)] = tgt
    return Tensor(x), fmask, ids, targets


def extend(base: BaseModel, dataset: list[Utterance], cfg: TrainConfig,
           on_step=None, checkpoint_dir: str | None = None,
           ) -> tuple[DualPipelineModel, list[tuple[int, float, float]]]:
    """Fine-tune a fresh extension on pooled new-language data.

    Refuses to run if the base digest does not verify; asserts afterwards
    that training left the base untouched. Returns the last-step model and
    the full (step, lr, loss) log.
    """
    if not dataset:
        raise ConfigError("empty extension dataset")
    base.verify_digest()
    languages = sorted({u.lang for u in dataset})
    sec_vocab = train_bpe([u.text for u in dataset],
                          max(cfg.sec_vocab_size, 256 + 5 + len(languages)),
                          languages=tuple(languages))
    model = build_extension(base, sec_vocab, cfg.rank, cfg.alpha,
                            cfg.start_layer, cfg.seed)
    shared = precompute_shared(model, dataset)
    trainable = model.trainable_params()
    sched = TriStageSchedule(peak_lr=cfg.peak_lr, total_steps=cfg.steps)
    state = AdamState()
    order_rng = make_rng(cfg.seed, "extend-batches")
    log: list[tuple[int, float, float]] = []
    order: list[int] = []
    losses: list[float] = []
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order += list(order_rng.permutation(len(dataset)))
        batch = [dataset[i] for i in order[:cfg.batch_size]]
        order = order[cfg.batch_size:]
        x, fmask, ids, targets = _assemble(model, batch, shared)
        try:
            sec = encode_secondary_from(model, x, fmask)
            loss = secondary_batch_loss(model, sec, ids, targets, fmask)
        except T.NonFiniteError:
            raise TrainingDiverged(step, {"step": step, "seed": cfg.seed,
                                          "recent_losses": losses[-20:]}) from None
        for p in trainable.values():
            p.grad = None
        loss.backward()
        clip_global_norm(trainable, cfg.grad_clip)
        lr = lr_at(sched, step + 1)
        adam_step(trainable, state, lr)
        losses.append(float(loss.data))
        log.append((step, lr, float(loss.data)))
        if on_step is not None:
            on_step(step, float(loss.data))
        if checkpoint_dir and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            from .checkpoint import save_extension_model
            save_extension_model(f"{checkpoint_dir}/step{step + 1:06d}", model)
    base.verify_digest()
    return model, log


def loss_log_csv(log: list[tuple[int, float, float]]) -> str:
    lines = ["step,lr,loss"]
    lines += [f"{s},{lr:.8g},{loss:.8g}" for s, lr, loss in log]
    return "\n".join(lines) + "\n"


def sweep(base: BaseModel, train_set: list[Utterance], eval_set: list[Utterance],
          axis: str, values: list[int], cfg: TrainConfig,
          beam_size: int = 5, on_run=None) -> list[dict]:
    """Train one extension per axis value and evaluate held-out CER.

    axis is 'rank' or 'start_layer'; rows are dicts with value, additional
    parameter count, and macro-averaged CER over the eval languages.
    """
    from dataclasses import replace
    from .decoding import decode_secondary_batch
    from .evaluation import evaluate
    from .extension import count_additional_params
    if axis not in ("rank", "start_layer"):
        raise ConfigError(f"unknown sweep axis '{axis}'")
    rows: list[dict] = []
    for value in values:
        run_cfg = replace(cfg, **{axis: value})
        model, _ = extend(base, train_set, run_cfg)
        counts = count_additional_params(model.cfg, run_cfg.rank, run_cfg.start_layer)
        hyps = decode_secondary_batch(model, eval_set, beam_size=beam_size)
        refs = {u.utt_id: u.text for u in eval_set}
        lang_map = {u.utt_id: u.lang for u in eval_set}
        report = evaluate(refs, hyps, lang_map)
        rows.append({"value": value, "params": counts["total"],
                     "avg_cer": report.macro_cer})
        if on_run is not None:
            on_run(rows[-1])
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = ["value,params,avg_cer"]
    lines += [f"{r['value']},{r['params']},{r['avg_cer']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
