"""Small bidirectional transformer and the concatenated contextual embedding (CCE) head.

Sentence and word vectors both use avg-first-last pooling: the embedding
layer output and the final block output are averaged per token, then
averaged over the pooled positions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, TokenSeq, Vocab, tokenize


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    d: int = 128
    ffn: int = 512
    max_len: int = 64
    cce_dim: int | None = None
    include_specials: bool = True
    snt_only: bool = False
    fc_init: str = "half-identity"
    init_std: float = 0.02
    pos_init_std: float = 0.002
    fc_noise: float = 0.01

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"hidden size {self.d} is not divisible by {self.heads} heads")
        if self.cce_dim is None:
            self.cce_dim = self.d
        if self.fc_init not in ("half-identity", "identity"):
            raise ValueError(f"unknown fc_init {self.fc_init!r}")
        if self.fc_init == "identity" and self.cce_dim != self.fc_in:
            raise ValueError("identity FC init needs cce_dim equal to the FC input size")

    @property
    def fc_in(self) -> int:
        return self.d if self.snt_only else 2 * self.d

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def init_params(config: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, std = config.d, config.ffn, config.init_std
    P: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, std, (config.vocab_size, d)),
        "pos_emb": rng.normal(0, config.pos_init_std, (config.max_len, d)),
        "emb_ln.g": np.ones(d),
        "emb_ln.b": np.zeros(d),
    }
    for i in range(config.layers):
        p = f"block{i}."
        for w in ("q", "k", "v", "o"):
            P[p + w + ".w"] = rng.normal(0, std, (d, d))
            P[p + w + ".b"] = np.zeros(d)
        P[p + "ln1.g"], P[p + "ln1.b"] = np.ones(d), np.zeros(d)
        P[p + "ff1.w"], P[p + "ff1.b"] = rng.normal(0, std, (d, f)), np.zeros(f)
        P[p + "ff2.w"], P[p + "ff2.b"] = rng.normal(0, std, (f, d)), np.zeros(d)
        P[p + "ln2.g"], P[p + "ln2.b"] = np.ones(d), np.zeros(d)
    P["mlm.b"] = np.zeros(config.vocab_size)
    if config.fc_init == "identity":
        fc = np.eye(config.fc_in)
    elif config.snt_only:
        fc = np.eye(d, config.cce_dim) + rng.normal(0, config.fc_noise, (d, config.cce_dim))
    else:
        block = np.eye(d, config.cce_dim)
        fc = np.vstack([block, block]) / 2 + rng.normal(0, config.fc_noise, (2 * d, config.cce_dim))
    P["fc.w"] = fc
    P["fc.b"] = np.zeros(config.cce_dim)
    return {k: ad.parameter(v, name=k) for k, v in P.items()}


@dataclass
class LayerOutputs:
    """Per-layer token states for a padded batch; ``layers[0]`` is the embedding output."""

    layers: list[Tensor]
    mask: np.ndarray

    @property
    def first(self) -> Tensor:
        return self.layers[0]

    @property
    def last(self) -> Tensor:
        return self.layers[-1]

    def stacked(self) -> np.ndarray:
        return np.stack([h.data for h in self.layers])


def wrap_ids(ids: Sequence[int]) -> list[int]:
    return [CLS_ID, *ids, SEP_ID]


def pad_batch(seqs: Sequence[Sequence[int]], config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Wrap each id list in [CLS] ... [SEP] and right-pad; returns (ids, mask)."""
    wrapped = [wrap_ids(s) for s in seqs]
    L = max(len(w) for w in wrapped)
    if L > config.max_len:
        raise ValueError(f"sequence of {L} tokens (with specials) exceeds max_len={config.max_len}")
    ids = np.full((len(wrapped), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(wrapped), L), dtype=bool)
    for i, w in enumerate(wrapped):
        ids[i, :len(w)] = w
        mask[i, :len(w)] = True
    return ids, mask


def _attention(h: Tensor, params, prefix: str, bias: np.ndarray, heads: int) -> Tensor:
    B, L, d = h.shape
    dh = d // heads

    def split(x):
        return x.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ params[prefix + "q.w"] + params[prefix + "q.b"])
    k = split(h @ params[prefix + "k.w"] + params[prefix + "k.b"])
    v = split(h @ params[prefix + "v.w"] + params[prefix + "v.b"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + bias
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, d)
    return ctx @ params[prefix + "o.w"] + params[prefix + "o.b"]


def encode_batch(ids: np.ndarray, mask: np.ndarray, params, config: EncoderConfig) -> LayerOutputs:
    """Post-norm transformer over a padded (B, L) id matrix."""
    ids = np.asarray(ids, dtype=np.int64)
    B, L = ids.shape
    if L > config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len={config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {config.vocab_size}")
    x = ad.embedding(params["tok_emb"], ids) + params["pos_emb"][:L]
    h = ad.layer_norm(x, params["emb_ln.g"], params["emb_ln.b"])
    layers = [h]
    bias = np.where(mask, 0.0, -1e9)[:, None, None, :]
    bias = np.broadcast_to(bias, (B, config.heads, L, L)).copy()
    for i in range(config.layers):
        p = f"block{i}."
        h = ad.layer_norm(h + _attention(h, params, p, bias, config.heads), params[p + "ln1.g"], params[p + "ln1.b"])
        ff = ad.gelu(h @ params[p + "ff1.w"] + params[p + "ff1.b"]) @ params[p + "ff2.w"] + params[p + "ff2.b"]
        h = ad.layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"])
        layers.append(h)
    return LayerOutputs(layers, mask)


def encode_tokens(seq: TokenSeq | Sequence[int], config: EncoderConfig, params) -> LayerOutputs:
    """Encode one sequence; the result has batch size 1."""
    ids = seq.ids if isinstance(seq, TokenSeq) else list(seq)
    arr, mask = pad_batch([ids], config)
    return encode_batch(arr, mask, params, config)


def _pool(outputs: LayerOutputs, weights: np.ndarray) -> Tensor:
    B, L = weights.shape
    mixed = (outputs.first + outputs.last) * 0.5
    w = Tensor(weights.reshape(B, 1, L))
    return (w @ mixed).reshape(B, mixed.shape[-1])


def sentence_weights(mask: np.ndarray, include_specials: bool = True) -> np.ndarray:
    m = mask.astype(np.float64).copy()
    if not include_specials:
        lengths = mask.sum(axis=1)
        m[:, 0] = 0.0
        m[np.arange(len(m)), lengths - 1] = 0.0
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("sentence embedding over an empty sequence")
    return m / counts


def span_weights(mask: np.ndarray, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Uniform weights over each token span, shifted by one for the leading [CLS]."""
    B, L = mask.shape
    w = np.zeros((B, L))
    lengths = mask.sum(axis=1)
    for i, (s, e) in enumerate(spans):
        if not 0 <= s < e or e + 1 > lengths[i] - 1:
            raise ValueError(f"token span {(s, e)} out of range for sequence of {lengths[i] - 2} tokens")
        w[i, s + 1:e + 1] = 1.0 / (e - s)
    return w


def sentence_embedding(outputs: LayerOutputs, include_specials: bool = True) -> Tensor:
    """(B, d) mean over positions of the first/last layer average."""
    return _pool(outputs, sentence_weights(outputs.mask, include_specials))


def word_embedding(outputs: LayerOutputs, spans) -> Tensor:
    if isinstance(spans, tuple) and len(spans) == 2 and isinstance(spans[0], (int, np.integer)):
        spans = [spans]
    return _pool(outputs, span_weights(outputs.mask, spans))


def cce_head(sent: Tensor, word: Tensor | None, params) -> Tensor:
    """Splice [sentence | word] (or sentence alone) and apply the affine FC layer."""
    z = sent if word is None else ad.concat([sent, word], axis=-1)
    return z @ params["fc.w"] + params["fc.b"]


@dataclass
class CCE:
    vector: np.ndarray
    source: object = None


class TokenCache:
    """Memoized tokenization keyed by raw sentence text."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self._cache: dict[str, TokenSeq] = {}

    def __call__(self, text: str) -> TokenSeq:
        seq = self._cache.get(text)
        if seq is None:
            seq = self._cache[text] = tokenize(text, self.vocab)
        return seq


def encode_wps_batch(wpss: Sequence, tokens: TokenCache, params, config: EncoderConfig,
                     use_head: bool = True) -> Tensor:
    """CCE rows (or raw pooled vectors when ``use_head`` is False) for a list of WPS."""
    seqs = [tokens(w.sentence.raw).ids for w in wpss]
    ids, mask = pad_batch(seqs, config)
    out = encode_batch(ids, mask, params, config)
    sent = sentence_embedding(out, config.include_specials)
    word = None if config.snt_only else word_embedding(out, [w.token_span for w in wpss])
    if not use_head:
        return sent if word is None else ad.concat([sent, word], axis=-1)
    return cce_head(sent, word, params)


def cce(wps, config: EncoderConfig, params, vocab: Vocab) -> CCE:
    vec = encode_wps_batch([wps], TokenCache(vocab), params, config)
    return CCE(vec.data[0].copy(), wps)


def save_config(config: EncoderConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_json() + "\n")


def load_config(path) -> EncoderConfig:
    with open(path, encoding="utf-8") as fh:
        return EncoderConfig.from_dict(json.load(fh))
