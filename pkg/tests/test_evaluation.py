"""CER against a brute-force recursive oracle, normalization rules, reports."""

import numpy as np
import pytest

from dualpipe.evaluation import (EvalError, cer, edit_ops, evaluate,
                                 levenshtein, load_hyps_jsonl, load_refs_jsonl,
                                 normalize_basic)


def brute_levenshtein(a: str, b: str) -> int:
    """Textbook recursion; only usable on short strings."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return brute_levenshtein(a[1:], b[1:])
    return 1 + min(brute_levenshtein(a[1:], b),
                   brute_levenshtein(a, b[1:]),
                   brute_levenshtein(a[1:], b[1:]))


def test_normalize_examples():
    assert normalize_basic("Hello,  World!") == "hello world"
    assert normalize_basic("") == ""
    # NFKC folds the fullwidth C, then lowercase
    assert normalize_basic("Ｃafé") == "café"
    assert normalize_basic("  a\t\nb  ") == "a b"
    assert normalize_basic("+$%^") == ""


def test_cer_basics():
    assert cer("abc", "abc") == 0.0
    assert cer("abc", "axc") == pytest.approx(1 / 3)
    assert cer("kitten", "sitting") == pytest.approx(0.5)


def test_cer_empty_cases():
    assert cer("", "") == 0.0
    assert cer("", "xyz") == 3.0
    assert cer("ab", "") == 1.0


def test_cer_matches_bruteforce_on_random_pairs():
    rng = np.random.Generator(np.random.Philox(12))
    alphabet = "abcdε"
    for _ in range(1000):
        n, m = rng.integers(0, 9), rng.integers(0, 9)
        a = "".join(alphabet[i] for i in rng.integers(0, 5, n))
        b = "".join(alphabet[i] for i in rng.integers(0, 5, m))
        assert levenshtein(a, b) == brute_levenshtein(a, b)


def test_cer_denominator_asymmetry():
    a, b = "abcd", "abx"
    assert cer(a, b) * len(a) == pytest.approx(cer(b, a) * len(b))


def test_edit_ops_decompose_distance():
    rng = np.random.Generator(np.random.Philox(13))
    for _ in range(200):
        n, m = rng.integers(0, 8), rng.integers(0, 8)
        a = "".join("abc"[i] for i in rng.integers(0, 3, n))
        b = "".join("abc"[i] for i in rng.integers(0, 3, m))
        s, d, i = edit_ops(a, b)
        assert s + d + i == levenshtein(a, b)


def test_evaluate_identity_and_macro_average():
    refs = {"u1": "aaaa", "u2": "bbbb", "u3": "cccc", "u4": "dddd"}
    hyps = {"u1": "aaaa", "u2": "bbbb", "u3": "cccc", "u4": "ddxd"}
    langs = {"u1": "A", "u2": "A", "u3": "B", "u4": "B"}
    rep = evaluate(refs, hyps, langs)
    assert rep.per_language["A"].cer == 0.0
    assert rep.per_language["B"].cer == pytest.approx(1 / 8)
    assert rep.macro_cer == pytest.approx((0.0 + 1 / 8) / 2)
    assert rep.n_utts == 4


def test_evaluate_macro_average_example():
    # one language at CER 0, another at 0.2 -> macro 0.1
    refs = {"a": "xxxxx", "b": "yyyyy"}
    hyps = {"a": "xxxxx", "b": "yyyyz"}
    rep = evaluate(refs, hyps, {"a": "L1", "b": "L2"})
    assert rep.macro_cer == pytest.approx(0.1)


def test_evaluate_id_mismatch_lists_ids():
    with pytest.raises(EvalError, match="u2"):
        evaluate({"u1": "a", "u2": "b"}, {"u1": "a"}, {"u1": "L", "u2": "L"})


def test_evaluate_flags_empty_ref_anomaly():
    rep = evaluate({"u1": "!!!"}, {"u1": "abc"}, {"u1": "L"})   # ref normalizes empty
    assert rep.anomalies == ["u1"]
    assert rep.per_language["L"].cer == pytest.approx(3.0)


def test_report_serialization_roundtrip(tmp_path):
    refs = {"u1": "hola", "u2": "halo"}
    hyps = {"u1": "hola", "u2": "hallo"}
    rep = evaluate(refs, hyps, {"u1": "L", "u2": "L"})
    d = rep.to_dict()
    assert d["per_language"]["L"]["cer"] == rep.per_language["L"].cer
    assert "macro-average" in rep.table()

    import json
    ref_path = tmp_path / "refs.jsonl"
    ref_path.write_text("\n".join(
        json.dumps({"utt_id": k, "lang": "L", "text": v}) for k, v in refs.items()),
        encoding="utf-8")
    hyp_path = tmp_path / "hyps.jsonl"
    hyp_path.write_text("\n".join(
        json.dumps({"utt_id": k, "transcript": v}) for k, v in hyps.items()),
        encoding="utf-8")
    refs2, langs2 = load_refs_jsonl(str(ref_path))
    hyps2 = load_hyps_jsonl(str(hyp_path))
    assert refs2 == refs and hyps2 == hyps and langs2 == {"u1": "L", "u2": "L"}
