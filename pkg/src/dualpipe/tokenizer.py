"""Byte-level BPE tokenizer.

Ids 0..255 are the raw bytes, followed by the special tokens, followed by
learned merge tokens. There is no pre-tokenization: merges apply across the
whole byte sequence of a line, whitespace included. Byte fallback makes every
UTF-8 string encodable and decode(encode(s)) == s always holds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

N_BYTES = 256

SOT = "<|sot|>"
EOT = "<|eot|>"
PAD = "<|pad|>"
TRANSCRIBE = "<|transcribe|>"
NOTIMESTAMPS = "<|notimestamps|>"

BASE_SPECIALS = (SOT, EOT, PAD, TRANSCRIBE, NOTIMESTAMPS)


def lang_token(name: str) -> str:
    return f"<|lang:{name}|>"


class TokenizerError(ValueError):
    pass


@dataclass
class BpeVocab:
    """Merge rules plus the id maps derived from them.

    merges[k] joins two existing tokens; the new token's bytes are their
    concatenation. If those bytes already name an earlier token, the merge
    reuses that id instead of minting a new one (keeps bytes -> id injective,
    which the vocab file format relies on).
    """
    merges: list[tuple[bytes, bytes]]
    specials: dict[str, int]
    token_bytes: list[bytes | None] = field(default_factory=list, repr=False)
    bytes_to_id: dict[bytes, int] = field(default_factory=dict, repr=False)
    merge_seq: list[tuple[tuple[int, int], int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.token_bytes:
            self._build()

    def _build(self) -> None:
        n_specials = len(self.specials)
        if sorted(self.specials.values()) != list(range(N_BYTES, N_BYTES + n_specials)):
            raise TokenizerError("special ids must be the contiguous block after the bytes")
        self.token_bytes = [bytes([i]) for i in range(N_BYTES)]
        self.token_bytes += [None] * n_specials
        self.bytes_to_id = {b: i for i, b in enumerate(self.token_bytes[:N_BYTES])}
        self.merge_seq = []
        for left, right in self.merges:
            lid = self.bytes_to_id.get(left)
            rid = self.bytes_to_id.get(right)
            if lid is None or rid is None:
                raise TokenizerError(f"merge references unknown token ({left!r}, {right!r})")
            joined = left + right
            new_id = self.bytes_to_id.get(joined)
            if new_id is None:
                new_id = len(self.token_bytes)
                self.token_bytes.append(joined)
                self.bytes_to_id[joined] = new_id
            self.merge_seq.append(((lid, rid), new_id))

    @property
    def size(self) -> int:
        return len(self.token_bytes)

    @property
    def special_ids(self) -> set[int]:
        return set(self.specials.values())

    def special(self, name: str) -> int:
        try:
            return self.specials[name]
        except KeyError:
            raise TokenizerError(f"unknown special token '{name}'") from None

    def lang_tag_ids(self) -> dict[str, int]:
        """Language name -> tag token id, for every registered language."""
        out = {}
        for name, tid in self.specials.items():
            if name.startswith("<|lang:") and name.endswith("|>"):
                out[name[len("<|lang:"):-2]] = tid
        return out

    # -- codec ---------------------------------------------------------------

    def encode(self, text: str) -> list[int]:
        ids = list(text.encode("utf-8"))
        for pair, new_id in self.merge_seq:
            if len(ids) < 2:
                break
            ids = _apply_merge(ids, pair, new_id)
        return ids

    def decode(self, ids: list[int]) -> str:
        chunks = []
        for i in ids:
            if i < 0 or i >= len(self.token_bytes):
                raise TokenizerError(f"unknown token id {i}")
            b = self.token_bytes[i]
            if b is None:
                raise TokenizerError(f"id {i} is a special token, not text")
            chunks.append(b)
        try:
            return b"".join(chunks).decode("utf-8")
        except UnicodeDecodeError as e:
            raise TokenizerError(f"corrupt id stream: {e}") from None

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "merges": [[list(l), list(r)] for l, r in self.merges],
            "specials": self.specials,
        }
        return json.dumps(payload, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "BpeVocab":
        payload = json.loads(text)
        merges = [(bytes(l), bytes(r)) for l, r in payload["merges"]]
        return cls(merges=merges, specials=dict(payload["specials"]))


def _apply_merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    """Replace left-to-right non-overlapping occurrences of pair with new_id."""
    left, right = pair
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == left and ids[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(corpus: list[str], vocab_size: int, languages: tuple[str, ...] = ()) -> BpeVocab:
    """Learn merges by greedy highest-frequency pair replacement.

    Stops when the vocabulary reaches vocab_size or no adjacent pair occurs
    at least twice. Frequency ties break toward the lexicographically
    smallest (left_bytes, right_bytes) pair.
    """
    specials = {name: N_BYTES + i
                for i, name in enumerate(BASE_SPECIALS + tuple(lang_token(l) for l in languages))}
    floor = N_BYTES + len(specials)
    if vocab_size < floor:
        raise TokenizerError(f"vocab_size {vocab_size} below minimum {floor}")
    if not corpus:
        raise TokenizerError("empty corpus")

    token_bytes: dict[int, bytes] = {i: bytes([i]) for i in range(N_BYTES)}
    bytes_to_id: dict[bytes, int] = {b: i for i, b in token_bytes.items()}
    seqs = [list(line.encode("utf-8")) for line in corpus]
    merges: list[tuple[bytes, bytes]] = []
    next_id = floor

    while next_id < vocab_size:
        counts: dict[tuple[int, int], int] = {}
        for seq in seqs:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        best = None
        best_key = None
        for pair, c in counts.items():
            if c < 2:
                continue
            key = (-c, token_bytes[pair[0]], token_bytes[pair[1]])
            if best_key is None or key < best_key:
                best_key = key
                best = pair
        if best is None:
            break
        joined = token_bytes[best[0]] + token_bytes[best[1]]
        merges.append((token_bytes[best[0]], token_bytes[best[1]]))
        new_id = bytes_to_id.get(joined)
        if new_id is None:
            new_id = next_id
            next_id += 1
            token_bytes[new_id] = joined
            bytes_to_id[joined] = new_id
        seqs = [_apply_merge(seq, best, new_id) for seq in seqs]

    return BpeVocab(merges=merges, specials=specials)
