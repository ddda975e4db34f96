"""Word-positioned samples (WPS): a sentence plus the exact span of one aligned word."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .corpus import BilingualDictionary, Sentence, SentencePair
from .tokenizer import (Vocab, count_spaced_word, detokenize, find_token_subsequence,
                        tokenize)


@dataclass(frozen=True)
class WPS:
    sentence: Sentence
    word: str
    token_span: tuple[int, int]
    char_span: tuple[int, int]

    def __post_init__(self):
        s, e = self.token_span
        if not 0 <= s < e:
            raise ValueError(f"bad token span {self.token_span}")
        cs, ce = self.char_span
        if self.sentence.raw[cs:ce] != self.word:
            raise ValueError(f"char span {self.char_span} does not cover {self.word!r}")


@dataclass(frozen=True)
class ParallelWPSPair:
    s: WPS
    t: WPS

    def __post_init__(self):
        if self.s.sentence.lang == self.t.sentence.lang:
            raise ValueError("parallel WPS pair must span two languages")


def _char_span(text: str, word: str) -> tuple[int, int]:
    """Character offsets of the single whitespace-delimited occurrence of ``word``."""
    pos = 0
    for w in text.split():
        pos = text.index(w, pos)
        if w == word:
            return pos, pos + len(w)
        pos += len(w)
    raise ValueError(f"{word!r} not found in {text!r}")


def _unique_span(text: str, word: str, seq, vocab: Vocab, stats: Counter | None, side: str):
    if count_spaced_word(text, word) != 1:
        if stats is not None:
            stats[f"{side}_spaced_count"] += 1
        return None
    needle = tokenize(word, vocab)
    hits = find_token_subsequence(seq, needle)
    if len(hits) != 1:
        if stats is not None:
            stats[f"{side}_token_count"] += 1
        return None
    return hits[0], hits[0] + len(needle)


def build_parallel_wps(pair: SentencePair, dictionary: BilingualDictionary, vocab: Vocab,
                       stats: Counter | None = None) -> list[ParallelWPSPair]:
    """All dictionary words that occur exactly once on both sides, by both counts.

    A word qualifies when its whitespace-delimited count and its token
    subsequence count are both 1 in sentence A, and the same holds for its
    translation in sentence B. Pairs come out in dictionary order. ``stats``,
    if given, collects per-condition rejection counts.
    """
    if (pair.a.lang, pair.b.lang) != (dictionary.src_lang, dictionary.tgt_lang):
        raise ValueError(
            f"sentence languages {pair.a.lang}/{pair.b.lang} do not match dictionary "
            f"{dictionary.src_lang}/{dictionary.tgt_lang}")
    a_text, b_text = pair.a.raw, pair.b.raw
    a_seq, b_seq = tokenize(a_text, vocab), tokenize(b_text, vocab)
    a_words = set(a_text.split())
    out = []
    for src, tgt in dictionary:
        if src not in a_words:
            if stats is not None:
                stats["a_absent"] += 1
            continue
        a_span = _unique_span(a_text, src, a_seq, vocab, stats, "a")
        if a_span is None:
            continue
        b_span = _unique_span(b_text, tgt, b_seq, vocab, stats, "b")
        if b_span is None:
            continue
        s = WPS(pair.a, src, a_span, _char_span(a_text, src))
        t = WPS(pair.b, tgt, b_span, _char_span(b_text, tgt))
        out.append(ParallelWPSPair(s, t))
        if stats is not None:
            stats["emitted"] += 1
    return out


def build_corpus_wps(pairs, dictionary: BilingualDictionary, vocab: Vocab,
                     stats: Counter | None = None) -> list[ParallelWPSPair]:
    out = []
    for p in pairs:
        out.extend(build_parallel_wps(p, dictionary, vocab, stats))
    return out


def check_wps(w: WPS, vocab: Vocab) -> bool:
    """True if the token span detokenizes to the word."""
    seq = tokenize(w.sentence.raw, vocab)
    s, e = w.token_span
    return e <= len(seq) and detokenize(seq.pieces[s:e]) == w.word


# -- JSONL ----------------------------------------------------------------------------

def pair_to_json(p: ParallelWPSPair) -> dict:
    return {
        "a_text": p.s.sentence.raw,
        "a_word": p.s.word,
        "a_token_span": list(p.s.token_span),
        "b_text": p.t.sentence.raw,
        "b_word": p.t.word,
        "b_token_span": list(p.t.token_span),
        "a_lang": p.s.sentence.lang,
        "b_lang": p.t.sentence.lang,
        "index": p.s.sentence.index,
    }


def pair_from_json(d: dict, index: int = 0) -> ParallelWPSPair:
    index = d.get("index", index)
    a = Sentence(d["a_text"], d["a_lang"], index)
    b = Sentence(d["b_text"], d["b_lang"], index)
    s = WPS(a, d["a_word"], tuple(d["a_token_span"]), _char_span(a.raw, d["a_word"]))
    t = WPS(b, d["b_word"], tuple(d["b_token_span"]), _char_span(b.raw, d["b_word"]))
    return ParallelWPSPair(s, t)


def save_wps_jsonl(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_json(p), ensure_ascii=False) + "\n")


def load_wps_jsonl(path) -> list[ParallelWPSPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(pair_from_json(json.loads(line), lineno))
    return out
