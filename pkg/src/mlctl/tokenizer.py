"""Greedy longest-match subword tokenizer and the occurrence counts used for WPS filtering."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

UNK, PAD, MASK, CLS, SEP = "[UNK]", "[PAD]", "[MASK]", "[CLS]", "[SEP]"
SPECIALS = (UNK, PAD, MASK, CLS, SEP)
UNK_ID, PAD_ID, MASK_ID, CLS_ID, SEP_ID = range(5)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    lowercase: bool = False
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIALS:
            raise ValueError(f"vocab must start with the special tokens {SPECIALS}")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        """Five special-token lines followed by the regular tokens, one per line."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path, lowercase: bool = False) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh if line.rstrip("\n"))
        return cls(tokens, lowercase)


@dataclass
class TokenSeq:
    ids: list[int]
    pieces: list[str]
    word_spans: dict[int, tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus: Iterable, max_size: int, lowercase: bool = False) -> Vocab:
    """Specials, every seen character (as word-initial and ``##`` piece), then
    the most frequent whole words and suffix pieces until ``max_size``.

    ``corpus`` yields :class:`~mlctl.corpus.Sentence` objects or plain strings.
    Frequency ties are broken lexicographically.
    """
    words: Counter[str] = Counter()
    n = 0
    for item in corpus:
        text = getattr(item, "raw", item)
        if lowercase:
            text = text.lower()
        words.update(text.split())
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    chars = sorted({c for w in words for c in w})
    alphabet = chars + ["##" + c for c in chars]
    if max_size < len(SPECIALS) + len(alphabet):
        raise ValueError(
            f"max_size={max_size} is smaller than the {len(SPECIALS)} specials plus "
            f"{len(alphabet)} character tokens")

    candidates: Counter[str] = Counter()
    for w, f in words.items():
        if len(w) > 1:
            candidates[w] += f
        for k in range(1, len(w) - 1):
            candidates["##" + w[k:]] += f
    ranked = sorted(candidates.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = list(SPECIALS) + alphabet
    seen = set(tokens)
    for tok, _ in ranked:
        if len(tokens) >= max_size:
            break
        if tok not in seen:
            tokens.append(tok)
            seen.add(tok)
    return Vocab(tuple(tokens), lowercase)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-prefix decomposition of one word; unmatched characters become ``[UNK]``."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab.index:
                match = sub
                break
            end -= 1
        if match is None:
            pieces.append(UNK)
            start += 1
        else:
            pieces.append(match)
            start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    if vocab.lowercase:
        text = text.lower()
    ids: list[int] = []
    pieces: list[str] = []
    spans: dict[int, tuple[int, int]] = {}
    for wi, word in enumerate(text.split()):
        start = len(pieces)
        for p in wordpiece(word, vocab):
            pieces.append(p)
            ids.append(vocab.id(p))
        spans[wi] = (start, len(pieces))
    return TokenSeq(ids, pieces, spans)


def detokenize(pieces: Iterable[str]) -> str:
    out = ""
    for p in pieces:
        out += p[2:] if p.startswith("##") else (" " + p if out else p)
    return out


def count_spaced_word(text: str, word: str) -> int:
    """Occurrences of ``word`` delimited by whitespace, counting sentence boundaries as spaces."""
    if not word or len(word.split()) != 1 or word.strip() != word:
        raise ValueError(f"word must be non-empty without whitespace, got {word!r}")
    return sum(1 for w in text.split() if w == word)


def count_token_subsequence(haystack: TokenSeq, needle: TokenSeq) -> int:
    """Number of (possibly overlapping) contiguous occurrences of ``needle.ids``."""
    return len(find_token_subsequence(haystack, needle))


def find_token_subsequence(haystack: TokenSeq, needle: TokenSeq) -> list[int]:
    h, nd = haystack.ids, needle.ids
    if not nd:
        raise ValueError("needle must be non-empty")
    k = len(nd)
    first = nd[0]
    return [i for i in range(len(h) - k + 1) if h[i] == first and h[i:i + k] == nd]
