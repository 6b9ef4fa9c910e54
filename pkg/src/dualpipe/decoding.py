"""Beam search over either decoder, and the two-stage decoder-selection
policy for language-agnostic operation.

Stage 1 scores each decoder's own top predicted language tag; if the gap
reaches the threshold tau the higher-scoring decoder is committed without
ever running the other one to completion. Otherwise both decoders beam-decode
fully and the per-token average log-probabilities are compared, with the
bias beta added to the secondary decoder's average.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basemodel import BaseModel, primary_decoder_step
from .extension import (DualPipelineModel, LasState, encode_dual, las_enc_proj,
                        las_init_state, las_step)
from .tensor import Tensor, log_softmax_np
from .tokenizer import BpeVocab, EOT


class DecodeError(RuntimeError):
    pass


@dataclass
class Hypothesis:
    """Generated tokens (prompt excluded) with their log-probabilities."""
    ids: tuple[int, ...]
    logps: tuple[float, ...]
    total: float
    finished: bool
    state: object = field(default=None, repr=False, compare=False)

    @property
    def avg_logp(self) -> float:
        return self.total / max(len(self.logps), 1)


@dataclass(frozen=True)
class SelectionPolicy:
    tau: float = 0.5
    beta: float = 0.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def beam_search(step_fn, prefix: list[int], beam_size: int, max_len: int,
                eot_id: int) -> list[Hypothesis]:
    """Length-unnormalized beam search.

    step_fn(ids, state) -> (logp vector over the vocab, new state), where ids
    is the prompt plus the tokens generated so far. Finished hypotheses stay
    in the beam until displaced by higher-scoring ones; ties break toward the
    lexicographically smaller token sequence. If nothing finished within
    max_len, the best unfinished hypothesis is returned flagged.
    """
    if beam_size < 1:
        raise DecodeError("beam_size must be >= 1")
    beams = [Hypothesis(ids=(), logps=(), total=0.0, finished=False)]
    for _ in range(max_len):
        live = [h for h in beams if not h.finished]
        if not live:
            break
        candidates: list[Hypothesis] = [h for h in beams if h.finished]
        for h in live:
            logp, state = step_fn(list(prefix) + list(h.ids), h.state)
            k = min(beam_size, logp.shape[0])
            # per-hypothesis top-k by (logp desc, token id asc): the global
            # top beam_size can only contain each hypothesis's own top-k
            order = np.lexsort((np.arange(logp.shape[0]), -logp))[:k]
            for v in order:
                v = int(v)
                candidates.append(Hypothesis(
                    ids=h.ids + (v,),
                    logps=h.logps + (float(logp[v]),),
                    total=h.total + float(logp[v]),
                    finished=(v == eot_id),
                    state=state))
        candidates.sort(key=lambda h: (-h.total, h.ids))
        beams = candidates[:beam_size]
    beams.sort(key=lambda h: (-h.total, h.ids))
    return beams


def best_hypothesis(hyps: list[Hypothesis]) -> Hypothesis:
    for h in hyps:
        if h.finished:
            return h
    return hyps[0]


# -- step functions ---------------------------------------------------------------


def primary_step_fn(base: BaseModel, enc_out: Tensor):
    enc = enc_out if enc_out.data.ndim == 3 else Tensor(enc_out.data[None])

    def step(ids: list[int], state):
        logits = primary_decoder_step(base.params, base.cfg, enc, ids)
        return log_softmax_np(logits), None

    return step


def secondary_step_fn(model: DualPipelineModel, sec_out: Tensor):
    enc = sec_out if sec_out.data.ndim == 3 else Tensor(sec_out.data[None])
    enc_proj = las_enc_proj(model, enc)

    def step(ids: list[int], state):
        if state is None:
            state = las_init_state(model, 1)
            consume = ids
        else:
            consume = ids[-1:]
        logits = None
        for tok in consume:
            logits, state, _ = las_step(model, enc, np.asarray([tok]), state,
                                        enc_proj=enc_proj)
        return log_softmax_np(logits.data[0]), state

    return step


# -- transcript extraction ----------------------------------------------------------


def transcript_from_hyp(vocab: BpeVocab, hyp: Hypothesis) -> str:
    specials = vocab.special_ids
    text_ids = [i for i in hyp.ids if i not in specials]
    return vocab.decode(text_ids)


def _tag_argmax(logp: np.ndarray, tag_ids: dict[str, int]) -> tuple[str, int, float]:
    """Highest-probability language tag under a decoder's own tag set."""
    best = None
    for name in sorted(tag_ids):
        tid = tag_ids[name]
        score = float(logp[tid])
        if best is None or score > best[2]:
            best = (name, tid, score)
    if best is None:
        raise DecodeError("decoder has no language tags")
    return best


# -- single-decoder decodes ----------------------------------------------------------


def decode_primary_utt(base: BaseModel, feats, beam_size: int = 5,
                       max_len: int = 64) -> Hypothesis:
    enc = base.encode(feats)
    step = primary_step_fn(base, enc)
    hyps = beam_search(step, base.prompt_ids(), beam_size, max_len,
                       base.vocab.special(EOT))
    return best_hypothesis(hyps)


def decode_secondary_utt(model: DualPipelineModel, feats, beam_size: int = 5,
                         max_len: int = 64, sec_out: Tensor | None = None) -> Hypothesis:
    if sec_out is None:
        _, sec_out = encode_dual(model, feats)
    step = secondary_step_fn(model, sec_out)
    hyps = beam_search(step, [model.sec_prompt_id()], beam_size, max_len,
                       model.sec_vocab.special(EOT))
    return best_hypothesis(hyps)


def _worker_count() -> int:
    cap = os.environ.get("DUALPIPE_THREADS", "1")
    try:
        return max(1, int(cap))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    workers = _worker_count()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))   # order preserved -> deterministic


def decode_primary_batch(base: BaseModel, utts, beam_size: int = 5,
                         max_len: int = 64) -> dict[str, str]:
    hyps = _parallel_map(lambda u: decode_primary_utt(base, u.features, beam_size, max_len), utts)
    return {u.utt_id: transcript_from_hyp(base.vocab, h) for u, h in zip(utts, hyps)}


def decode_secondary_batch(model: DualPipelineModel, utts, beam_size: int = 5,
                           max_len: int = 64) -> dict[str, str]:
    hyps = _parallel_map(lambda u: decode_secondary_utt(model, u.features, beam_size, max_len), utts)
    return {u.utt_id: transcript_from_hyp(model.sec_vocab, h) for u, h in zip(utts, hyps)}


# -- decoder selection ---------------------------------------------------------------


def stage1_commit(s_p: float, s_s: float, tau: float) -> str | None:
    """Commit when the tag-score gap reaches tau; ties go to primary.
    Returns 'primary', 'secondary', or None (fall through to stage 2)."""
    if abs(s_p - s_s) >= tau:
        return "primary" if s_p >= s_s else "secondary"
    return None


def stage2_choice(a_p: float, a_s: float, beta: float) -> str:
    """Average-log-prob comparison with the secondary bias; ties go to primary."""
    return "secondary" if a_s + beta > a_p else "primary"


@dataclass
class SelectionResult:
    chosen: str                      # "primary" | "secondary"
    transcript: str
    stage: int
    s_p: float
    s_s: float
    a_p: float | None
    a_s: float | None
    tag_p: str
    tag_s: str
    early_exit: bool

    def to_record(self, utt_id: str) -> dict:
        return {"utt_id": utt_id, "chosen_decoder": self.chosen, "stage": self.stage,
                "s_p": self.s_p, "s_s": self.s_s, "a_p": self.a_p, "a_s": self.a_s,
                "transcript": self.transcript}


def select_decoder(model: DualPipelineModel, feats, policy: SelectionPolicy,
                   beam_size: int = 5, max_len: int = 64) -> SelectionResult:
    """Two-stage routing between the primary and secondary decoders."""
    base = model.base
    try:
        prim_out, sec_out = encode_dual(model, feats)
    except Exception as e:
        raise DecodeError(f"encoder failure: {e}") from e
    prim_out = Tensor(prim_out.data[None]) if prim_out.data.ndim == 2 else prim_out
    sec_out = Tensor(sec_out.data[None]) if sec_out.data.ndim == 2 else sec_out

    # stage 1: each decoder scores only its own top language tag
    try:
        logits_p = primary_decoder_step(base.params, base.cfg, prim_out, base.prompt_ids())
        tag_p, _, s_p = _tag_argmax(log_softmax_np(logits_p), base.vocab.lang_tag_ids())
    except Exception as e:
        raise DecodeError(f"primary decoder failure: {e}") from e
    try:
        logits_s, _, _ = las_step(model, sec_out,
                                  np.asarray([model.sec_prompt_id()]),
                                  las_init_state(model, 1))
        tag_s, _, s_s = _tag_argmax(log_softmax_np(logits_s.data[0]), model.tag_ids())
    except Exception as e:
        raise DecodeError(f"secondary decoder failure: {e}") from e

    chosen = stage1_commit(s_p, s_s, policy.tau)
    if chosen is not None:
        if chosen == "primary":
            hyp = best_hypothesis(beam_search(primary_step_fn(base, prim_out),
                                              base.prompt_ids(), beam_size, max_len,
                                              base.vocab.special(EOT)))
            text = transcript_from_hyp(base.vocab, hyp)
        else:
            hyp = decode_secondary_utt(model, feats, beam_size, max_len, sec_out=sec_out)
            text = transcript_from_hyp(model.sec_vocab, hyp)
        return SelectionResult(chosen=chosen, transcript=text, stage=1,
                               s_p=s_p, s_s=s_s, a_p=None, a_s=None,
                               tag_p=tag_p, tag_s=tag_s, early_exit=True)

    # stage 2: full decode on both sides, compare average log-probs
    hyp_p = best_hypothesis(beam_search(primary_step_fn(base, prim_out),
                                        base.prompt_ids(), beam_size, max_len,
                                        base.vocab.special(EOT)))
    hyp_s = decode_secondary_utt(model, feats, beam_size, max_len, sec_out=sec_out)
    a_p = hyp_p.avg_logp
    a_s = hyp_s.avg_logp
    chosen = stage2_choice(a_p, a_s, policy.beta)
    if chosen == "secondary":
        text = transcript_from_hyp(model.sec_vocab, hyp_s)
    else:
        text = transcript_from_hyp(base.vocab, hyp_p)
    return SelectionResult(chosen=chosen, transcript=text, stage=2,
                           s_p=s_p, s_s=s_s, a_p=a_p, a_s=a_s,
                           tag_p=tag_p, tag_s=tag_s, early_exit=False)


def select_decoder_batch(model: DualPipelineModel, utts, policy: SelectionPolicy,
                         beam_size: int = 5, max_len: int = 64) -> list[dict]:
    results = _parallel_map(
        lambda u: select_decoder(model, u.features, policy, beam_size, max_len), utts)
    return [r.to_record(u.utt_id) for u, r in zip(utts, results)]


def records_to_jsonl(records: list[dict]) -> str:
    return "\n".join(json.dumps(r, ensure_ascii=False) for r in records) + "\n"
