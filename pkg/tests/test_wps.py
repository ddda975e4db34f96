from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlctl.corpus import BilingualDictionary, Sentence, SentencePair, make_synthetic_bitext
from mlctl.tokenizer import build_vocab
from mlctl.wps import (WPS, build_corpus_wps, build_parallel_wps, check_wps, load_wps_jsonl,
                       save_wps_jsonl)

from oracles import brute_force_wps, random_tiny_case


def pair(a, b, i=1):
    return SentencePair(Sentence(a, "A", i), Sentence(b, "B", i))


def vocab_for(*texts, size=200):
    return build_vocab(list(texts), size)


def as_set(out):
    return {(p.s.word, p.t.word, p.s.token_span, p.t.token_span) for p in out}


def test_single_aligned_word():
    p = pair("the cat sat", "le chat assis")
    v = vocab_for(p.a.raw, p.b.raw)
    out = build_parallel_wps(p, BilingualDictionary({"cat": "chat"}), v)
    assert len(out) == 1
    assert out[0].s.word == "cat" and out[0].t.word == "chat"
    assert out[0].s.char_span == (4, 7)
    assert out[0].t.char_span == (3, 7)


def test_repeated_source_word_is_skipped():
    p = pair("cat saw cat", "chat a vu chat")
    v = vocab_for(p.a.raw, p.b.raw)
    stats = Counter()
    assert build_parallel_wps(p, BilingualDictionary({"cat": "chat"}), v, stats) == []
    assert stats["a_spaced_count"] == 1


def test_absent_target_is_skipped():
    p = pair("the cat sat", "le chien")
    v = vocab_for(p.a.raw, p.b.raw)
    assert build_parallel_wps(p, BilingualDictionary({"cat": "chat"}), v) == []


def test_token_count_rule_rejects_subword_collision():
    # "cat" appears once as a word, but its pieces also appear inside "cats"
    p = pair("cat cats", "chat chats")
    v = build_vocab(["cat cats", "chat chats"], 5 + 2 * 8)
    stats = Counter()
    out = build_parallel_wps(p, BilingualDictionary({"cat": "chat"}), v, stats)
    assert out == []
    assert stats["a_token_count"] == 1


def test_language_mismatch_rejected():
    p = pair("a b", "c d")
    with pytest.raises(ValueError, match="do not match"):
        build_parallel_wps(p, BilingualDictionary({"a": "c"}, "X", "Y"), vocab_for("a b", "c d"))


def test_wps_rejects_wrong_char_span():
    s = Sentence("the cat", "A", 1)
    with pytest.raises(ValueError, match="char span"):
        WPS(s, "cat", (1, 2), (0, 3))


def test_spans_detokenize_to_words():
    pairs, d = make_synthetic_bitext(30, 40, seed=5)
    v = build_vocab([p.a.raw for p in pairs] + [p.b.raw for p in pairs], 120)
    out = build_corpus_wps(pairs, d, v)
    assert out
    assert all(check_wps(p.s, v) and check_wps(p.t, v) for p in out)


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force_oracle(seed):
    pairs, d, v = random_tiny_case(seed + 1000)
    for p in pairs:
        assert as_set(build_parallel_wps(p, d, v)) == brute_force_wps(p, d, v)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_emitted_words_occur_once_by_both_counts(seed):
    pairs, d, v = random_tiny_case(seed)
    for p in pairs:
        for w in build_parallel_wps(p, d, v):
            assert p.a.raw.split().count(w.s.word) == 1
            assert p.b.raw.split().count(w.t.word) == 1


def test_jsonl_round_trip(tmp_path):
    pairs, d = make_synthetic_bitext(20, 15, seed=2)
    v = build_vocab([p.a.raw for p in pairs] + [p.b.raw for p in pairs], 100)
    out = build_corpus_wps(pairs, d, v)
    save_wps_jsonl(out, tmp_path / "w.jsonl")
    assert load_wps_jsonl(tmp_path / "w.jsonl") == out
