"""Parallel bitext, bilingual dictionaries and stop-word lists."""

from __future__ import annotations

import logging
import os
import string
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    """A corpus or dictionary line that does not match the TSV contract."""


@dataclass(frozen=True)
class Sentence:
    raw: str
    lang: str
    index: int

    def __post_init__(self):
        if not self.raw.strip():
            raise ValueError(f"empty sentence at index {self.index}")
        if not self.lang:
            raise ValueError("sentence language tag must be non-empty")


@dataclass(frozen=True)
class SentencePair:
    a: Sentence
    b: Sentence

    def __post_init__(self):
        if self.a.lang == self.b.lang:
            raise ValueError(f"sentence pair {self.a.index} has the same language on both sides")
        if self.a.index != self.b.index:
            raise ValueError(f"sentence pair indices differ: {self.a.index} != {self.b.index}")


@dataclass
class BilingualDictionary:
    """One target word per source word, insertion order preserved."""

    entries: dict[str, str] = field(default_factory=dict)
    src_lang: str = "A"
    tgt_lang: str = "B"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.items())

    def __getitem__(self, word: str) -> str:
        return self.entries[word]

    def __contains__(self, word: str) -> bool:
        return word in self.entries


def _check_file(path) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")


def load_parallel_corpus(path, lang_a: str = "A", lang_b: str = "B") -> list[SentencePair]:
    """Read ``<a text> TAB <b text>`` lines; blank lines are skipped.

    ``index`` is the 1-based line number in the file.
    """
    _check_file(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            a, b = fields[0].strip(), fields[1].strip()
            if not a or not b:
                raise CorpusFormatError(f"{path}:{lineno}: empty side in sentence pair")
            pairs.append(SentencePair(Sentence(a, lang_a, lineno), Sentence(b, lang_b, lineno)))
    return pairs


def save_parallel_corpus(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.a.raw}\t{p.b.raw}\n")


def load_stopwords(path) -> set[str]:
    _check_file(path)
    with open(path, encoding="utf-8") as fh:
        return {w.strip() for w in fh if w.strip()}


def load_dictionary(path, stopwords=frozenset(), src_lang: str = "A", tgt_lang: str = "B") -> BilingualDictionary:
    """Read ``<src> TAB <tgt>`` lines, dropping entries that touch a stop word.

    Duplicate source words keep their first translation. Multi-word entries
    are rejected as malformed.
    """
    _check_file(path)
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            src, tgt = fields[0].strip(), fields[1].strip()
            if not src or not tgt or len(src.split()) != 1 or len(tgt.split()) != 1:
                raise CorpusFormatError(f"{path}:{lineno}: dictionary entries must be single words")
            if src in stopwords or tgt in stopwords:
                continue
            if src in entries:
                logger.warning("%s:%d: duplicate source word %r ignored (keeping %r)", path, lineno, src, entries[src])
                continue
            entries[src] = tgt
    if not entries:
        logger.warning("%s: dictionary is empty after stop-word filtering", path)
    return BilingualDictionary(entries, src_lang, tgt_lang)


def save_dictionary(dictionary: BilingualDictionary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in dictionary:
            fh.write(f"{src}\t{tgt}\n")


def _random_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words = []
    while len(words) < count:
        length = int(rng.integers(3, 8))
        w = "".join(rng.choice(letters, size=length))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def make_synthetic_bitext(vocab_size: int, n_sentences: int, seed: int,
                          min_len: int = 5, max_len: int = 9):
    """Random ``synA`` sentences and their word-for-word ``synB`` translations.

    Returns ``(pairs, dictionary)``; the dictionary is exactly the mapping
    used to translate, so it has ``vocab_size`` entries.
    """
    if vocab_size < 10:
        raise ValueError(f"vocab_size must be >= 10, got {vocab_size}")
    if n_sentences < 1:
        raise ValueError(f"n_sentences must be >= 1, got {n_sentences}")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    src_words = _random_words(rng, vocab_size, taken)
    tgt_words = _random_words(rng, vocab_size, taken)
    mapping = dict(zip(src_words, tgt_words))
    pairs = []
    for i in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        words = [src_words[j] for j in rng.integers(0, vocab_size, size=length)]
        a = Sentence(" ".join(words), "synA", i + 1)
        b = Sentence(" ".join(mapping[w] for w in words), "synB", i + 1)
        pairs.append(SentencePair(a, b))
    return pairs, BilingualDictionary(mapping, "synA", "synB")
