"""Text normalization, character error rate, and per-language reporting.

Characters are Unicode scalar values (not grapheme clusters): simple,
deterministic, and identical on every platform. Normalization is applied to
both reference and hypothesis before scoring.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field


class EvalError(ValueError):
    pass


_WS = re.compile(r"\s+")


def normalize_basic(text: str) -> str:
    """NFKC fold, lowercase, drop punctuation/symbols, collapse whitespace."""
    text = unicodedata.normalize("NFKC", text).lower()
    kept = []
    for ch in text:
        cat = unicodedata.category(ch)
        if cat.startswith("P") or cat.startswith("S"):
            continue
        kept.append(ch)
    return _WS.sub(" ", "".join(kept)).strip()


def levenshtein(ref: str, hyp: str) -> int:
    """Unit-cost edit distance over code points (two-row DP)."""
    if len(ref) < len(hyp):
        return levenshtein(hyp, ref)
    prev = list(range(len(hyp) + 1))
    for i, rc in enumerate(ref, start=1):
        cur = [i]
        for j, hc in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (rc != hc)))
        prev = cur
    return prev[-1]


def edit_ops(ref: str, hyp: str) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) from a full-backtrace alignment.
    Deletions are reference characters the hypothesis missed."""
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i][j] = min(dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                           dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, d, ins


def cer(ref: str, hyp: str) -> float:
    """Edit distance divided by reference length.

    Empty reference with non-empty hypothesis is defined as len(hyp)/1 (an
    anomalous case the report flags); empty/empty is 0.
    """
    if not ref:
        return float(len(hyp))
    return levenshtein(ref, hyp) / len(ref)


@dataclass
class LangStats:
    n_utts: int = 0
    ref_len: int = 0
    distance: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0

    @property
    def cer(self) -> float:
        return self.distance / self.ref_len if self.ref_len else 0.0


@dataclass
class EvalReport:
    per_language: dict[str, LangStats]
    macro_cer: float
    n_utts: int
    anomalies: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "macro_cer": self.macro_cer,
            "n_utts": self.n_utts,
            "anomalies": self.anomalies,
            "per_language": {
                lang: {"cer": st.cer, "n_utts": st.n_utts, "ref_len": st.ref_len,
                       "distance": st.distance, "substitutions": st.subs,
                       "deletions": st.dels, "insertions": st.ins}
                for lang, st in sorted(self.per_language.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False)

    def table(self) -> str:
        lines = [f"{'language':<14} {'utts':>5} {'CER':>8} {'S':>5} {'D':>5} {'I':>5}"]
        for lang, st in sorted(self.per_language.items()):
            lines.append(f"{lang:<14} {st.n_utts:>5} {st.cer:>8.4f} "
                         f"{st.subs:>5} {st.dels:>5} {st.ins:>5}")
        lines.append(f"{'macro-average':<14} {self.n_utts:>5} {self.macro_cer:>8.4f}")
        return "\n".join(lines)


def evaluate(refs: dict[str, str], hyps: dict[str, str],
             lang_map: dict[str, str]) -> EvalReport:
    """Normalize both sides, score per utterance, aggregate per language.

    Per-language CER is total edit distance over total reference length;
    the macro average is the unweighted mean of per-language CERs.
    """
    missing_hyps = sorted(set(refs) - set(hyps))
    missing_refs = sorted(set(hyps) - set(refs))
    if missing_hyps or missing_refs:
        raise EvalError(f"utterance id mismatch; missing hyps: {missing_hyps[:5]}, "
                        f"missing refs: {missing_refs[:5]}")
    per_lang: dict[str, LangStats] = {}
    anomalies: list[str] = []
    for utt_id in sorted(refs):
        lang = lang_map.get(utt_id)
        if lang is None:
            raise EvalError(f"utterance '{utt_id}' has no language mapping")
        ref = normalize_basic(refs[utt_id])
        hyp = normalize_basic(hyps[utt_id])
        st = per_lang.setdefault(lang, LangStats())
        st.n_utts += 1
        s, d, ins = edit_ops(ref, hyp)
        if not ref:
            anomalies.append(utt_id)
            st.ref_len += 1
            st.distance += len(hyp)
        else:
            st.ref_len += len(ref)
            st.distance += s + d + ins
        st.subs += s
        st.dels += d
        st.ins += ins
    cers = [st.cer for st in per_lang.values()]
    macro = float(sum(cers) / len(cers)) if cers else 0.0
    return EvalReport(per_language=per_lang, macro_cer=macro,
                      n_utts=len(refs), anomalies=anomalies)


def load_refs_jsonl(path: str) -> tuple[dict[str, str], dict[str, str]]:
    """JSONL of {utt_id, lang, text} -> (refs, lang_map)."""
    refs: dict[str, str] = {}
    langs: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            refs[rec["utt_id"]] = rec["text"]
            langs[rec["utt_id"]] = rec["lang"]
    return refs, langs


def load_hyps_jsonl(path: str) -> dict[str, str]:
    """JSONL with at least {utt_id, transcript} (decode output) or {utt_id, text}."""
    hyps: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            hyps[rec["utt_id"]] = rec.get("transcript", rec.get("text", ""))
    return hyps
