"""Seeded synthetic languages: token strings rendered to feature-frame
sequences, standing in for audio.

Each language owns a small character inventory sampled from a fixed
multi-script pool, a word list over that inventory, and one emission
prototype vector per character. An utterance's features are the per-character
prototypes repeated for a 2-4 frame duration with Gaussian noise added.
Language difficulty is controlled by `char_spread` (distance between
character prototypes around the language's center) relative to
`noise_sigma`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng
from .tokenizer import lang_token

# Fixed pool of lowercase letters from several scripts. Inlined (rather than
# derived from unicodedata at import time) so inventories cannot drift across
# Unicode database versions.
CHAR_POOL = (
    "abcdefghijklmnopqrstuvwxyzàáâãäåæçèéêëìíîïðñòóôõöøùúûüýþÿāăąćĉċč"
    "ďđēĕėęěĝğġģĥħĩīĭįıĳĵķĸĺļľŀłńņňŉŋōŏőœŕŗřśŝşšţťŧũūŭůűųŵŷźżžſƀƃƅƈƌƍ"
    "ƒƕƙƚƛƞơƣƥƨƪƫƭưƴƶƹƺƽƾƿǆǉǌǎǐǒǔǖǘǚǜǝǟǡǣǥǧǩǫǭǯǰǳǵǹǻǽǿȁȃȅȇȉȋȍȏȑȓȕȗșțȝ"
    "ȟȡȣȥȧȩȫȭȯȱȳȴȵȶȷȸȹȼȿɀɂɇɉɋɍɏαβγδεζηθικλμνξοπρςστυφχψωабвгдежзийклм"
    "нопрстуфхцчшщъыьэюяѐёђѓєѕіїјљњћќѝўџѡѣѥѧѩѫѭѯѱѳѵѷѹѻѽѿҁҋҍҏґғҕҗҙқҝҟҡ"
    "ңҥҧҩҫҭүұҳҵҷҹһҽҿӂӄӆӈӊӌӎӏӑӓӕӗәӛӝӟӡӣӥӧөӫӭӯӱӳӵӷӹӻӽӿԁԃԅԇԉԋԍԏԑԓԕԗԙԛԝԟԡ"
    "ԣԥԧԩԫԭԯաբգդեզէըթժիլխծկհձղճմյնշոչպջռսվտրցւփքօֆაბგდევზთიკლმნოპჟრსტ"
    "უფქღყშჩცძწჭხჯჰḁḃḅḇḉḋḍḏḑḓḕḗḙḛḝḟḡḣḥḧḩḫḭḯḱḳḵḷḹḻḽḿṁṃṅṇṉṋṍṏṑṓṕṗṙṛṝṟṡṣ"
    "ṥṧṩṫṭṯṱṳṵṷṹṻṽṿẁẃẅẇẉẋẍẏẑẓẕẖẗẘẙẚẛẜẝẟạảấầẩẫậắằẳẵặẹẻẽếềểễệỉịọỏốồổỗộớ"
    "ờởỡợụủứừửữựỳỵỷỹỻỽỿ"
)

FEATURE_MAGIC = b"FEA1"
DUR_MIN, DUR_MAX = 2, 4
WORD_LEN_MIN, WORD_LEN_MAX = 2, 6
UTT_WORDS_MIN, UTT_WORDS_MAX = 3, 10


class SynthDataError(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    feat_dim: int = 40
    n_chars: int = 16
    n_words: int = 40
    noise_sigma: float = 0.3
    char_spread: float = 1.0
    center_scale: float = 1.0


@dataclass
class SyntheticLanguage:
    name: str
    seed: int
    alphabet: str                 # inventory plus the space character
    words: list[str]
    prototypes: np.ndarray        # [len(alphabet), feat_dim] float32
    noise_sigma: float

    @property
    def tag(self) -> str:
        return lang_token(self.name)

    @property
    def inventory(self) -> str:
        """Inventory without the space character."""
        return self.alphabet.replace(" ", "")

    def char_index(self, ch: str) -> int:
        i = self.alphabet.find(ch)
        if i < 0:
            raise SynthDataError(f"character {ch!r} not in language '{self.name}'")
        return i


@dataclass
class Utterance:
    utt_id: str
    lang: str
    text: str
    features: np.ndarray          # [n_frames, feat_dim] float32


@dataclass
class DatasetSplits:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    def all_utts(self) -> list[Utterance]:
        return self.train + self.dev + self.test


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_language(seed: int, params: SynthParams, name: str | None = None) -> SyntheticLanguage:
    """Deterministically build a language from its seed."""
    if params.n_words < 1:
        raise SynthDataError("n_words must be >= 1")
    if params.n_chars < 2:
        raise SynthDataError("n_chars must be >= 2")
    if params.n_chars > len(CHAR_POOL):
        raise SynthDataError(
            f"inventory exhausted: {params.n_chars} chars requested, pool has {len(CHAR_POOL)}")
    name = name if name is not None else f"L{seed}"

    rng = make_rng(seed, "inventory")
    idx = rng.choice(len(CHAR_POOL), size=params.n_chars, replace=False)
    inventory = "".join(sorted(CHAR_POOL[i] for i in idx))
    alphabet = inventory + " "

    wrng = make_rng(seed, "words")
    words: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(words) < params.n_words:
        attempts += 1
        if attempts > 200 * params.n_words:
            raise SynthDataError("cannot generate enough distinct words; enlarge n_chars")
        length = int(wrng.integers(WORD_LEN_MIN, WORD_LEN_MAX + 1))
        w = "".join(inventory[int(k)] for k in wrng.integers(0, len(inventory), size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)

    prng = make_rng(seed, "prototypes")
    center = _unit(prng.standard_normal(params.feat_dim)) * params.center_scale
    protos = np.empty((len(alphabet), params.feat_dim), dtype=np.float32)
    for i in range(len(alphabet)):
        direction = _unit(prng.standard_normal(params.feat_dim))
        protos[i] = (center + params.char_spread * direction).astype(np.float32)

    return SyntheticLanguage(name=name, seed=seed, alphabet=alphabet, words=words,
                             prototypes=protos, noise_sigma=params.noise_sigma)


def render(lang: SyntheticLanguage, text: str, noise_rng: np.random.Generator) -> np.ndarray:
    """Features for a text: per-character prototype frames plus noise.

    Durations depend only on (language, text) so that renderings of the same
    text differ only through the noise draw.
    """
    dur_rng = make_rng(lang.seed, "dur", text)
    rows = []
    for ch in text:
        i = lang.char_index(ch)
        dur = int(dur_rng.integers(DUR_MIN, DUR_MAX + 1))
        block = np.repeat(lang.prototypes[i][None, :], dur, axis=0)
        rows.append(block)
    feats = np.concatenate(rows, axis=0)
    if lang.noise_sigma > 0.0:
        feats = feats + lang.noise_sigma * noise_rng.standard_normal(feats.shape)
    return np.ascontiguousarray(feats, dtype=np.float32)


def gen_dataset(lang: SyntheticLanguage, n_utts: int, split_seed: int) -> DatasetSplits:
    """Generate utterances and split them 80/10/10 (disjoint by utt_id)."""
    if n_utts < 3:
        raise SynthDataError("need at least 3 utterances for train/dev/test")
    utts: list[Utterance] = []
    for i in range(n_utts):
        urng = make_rng(lang.seed, "utt", split_seed, i)
        n_words = int(urng.integers(UTT_WORDS_MIN, UTT_WORDS_MAX + 1))
        picks = urng.integers(0, len(lang.words), size=n_words)
        text = " ".join(lang.words[int(k)] for k in picks)
        feats = render(lang, text, urng)
        utts.append(Utterance(utt_id=f"{lang.name}-{i:05d}", lang=lang.name,
                              text=text, features=feats))
    order = make_rng(lang.seed, "split", split_seed).permutation(n_utts)
    n_dev = max(1, n_utts // 10)
    n_test = max(1, n_utts // 10)
    n_train = n_utts - n_dev - n_test
    if n_train < 1:
        n_train, n_dev, n_test = n_utts - 2, 1, 1
    train_ids = set(order[:n_train])
    dev_ids = set(order[n_train:n_train + n_dev])
    return DatasetSplits(
        train=[u for i, u in enumerate(utts) if i in train_ids],
        dev=[u for i, u in enumerate(utts) if i in dev_ids],
        test=[u for i, u in enumerate(utts) if i not in train_ids and i not in dev_ids],
    )


def inventory_overlap(a: SyntheticLanguage, b: SyntheticLanguage) -> float:
    """Jaccard-free overlap measure: shared chars over the smaller inventory."""
    sa, sb = set(a.inventory), set(b.inventory)
    return len(sa & sb) / min(len(sa), len(sb))


# -- disk format ---------------------------------------------------------------


def write_features(path: str, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise SynthDataError(f"{path}: bad feature-file magic {magic!r}")
        n_frames, feat_dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * n_frames * feat_dim), dtype="<f4")
    return data.reshape(n_frames, feat_dim).copy()


def save_dataset(root: str, languages: dict[str, SyntheticLanguage],
                 roles: dict[str, str], splits: dict[str, list[Utterance]]) -> None:
    """Write manifests, feature files, and language metadata under root."""
    feat_dir = os.path.join(root, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for split, utts in splits.items():
        lines = []
        for u in utts:
            rel = os.path.join("features", f"{u.utt_id}.fea")
            write_features(os.path.join(root, rel), u.features)
            lines.append(json.dumps(
                {"utt_id": u.utt_id, "lang": u.lang, "text": u.text, "feature_file": rel},
                ensure_ascii=False))
        _atomic_write(os.path.join(root, f"{split}.jsonl"), "\n".join(lines) + "\n")
    meta = {name: {"seed": lang.seed, "role": roles[name], "tag": lang.tag,
                   "noise_sigma": lang.noise_sigma, "alphabet": lang.alphabet,
                   "words": lang.words}
            for name, lang in languages.items()}
    _atomic_write(os.path.join(root, "languages.json"),
                  json.dumps(meta, ensure_ascii=False, indent=1))


def load_manifest(root: str, split: str) -> list[Utterance]:
    path = os.path.join(root, f"{split}.jsonl")
    utts = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            feats = read_features(os.path.join(root, rec["feature_file"]))
            utts.append(Utterance(utt_id=rec["utt_id"], lang=rec["lang"],
                                  text=rec["text"], features=feats))
    return utts


def load_language_roles(root: str) -> dict[str, str]:
    with open(os.path.join(root, "languages.json"), encoding="utf-8") as f:
        meta = json.load(f)
    return {name: rec["role"] for name, rec in meta.items()}


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
