"""Contrastive objectives over CCE batches: infoNCE, cross-zero NCE and the rho form.

For a batch of n parallel pairs the anchors are the 2n rows of
``concat(X, Y)``. Row ``i`` has its translation as the positive and the
other 2n - 2 rows (every row except itself and its positive) as negatives.

By default losses go through a max-shifted log-sum-exp. With
``precision="single"`` the literal ratio-of-exponentials form is evaluated
under :func:`~mlctl.autodiff.emulated_single`, so every intermediate value is
rounded to float32 the way a naive implementation would see it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import encode_batch
from .tokenizer import CLS_ID, MASK_ID, SEP_ID

INFO_NCE = "infonce"
CZ_NCE = "cz-nce"
LOSS_KINDS = (INFO_NCE, CZ_NCE)
PRECISIONS = ("double", "single")


@dataclass
class LossConfig:
    temperature: float = 0.07
    alpha: float = 0.1
    kind: str = CZ_NCE
    precision: str = "double"

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")


def normalize_kind(kind: str) -> str:
    k = kind.lower().replace("_", "-")
    aliases = {"infonce": INFO_NCE, "info-nce": INFO_NCE, "info": INFO_NCE,
               "cz-nce": CZ_NCE, "cznce": CZ_NCE, "cz": CZ_NCE}
    if k not in aliases:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return aliases[k]


def _precision(precision: str):
    return ad.emulated_single() if precision == "single" else contextlib.nullcontext()


# -- similarities ------------------------------------------------------------------------

def _norm(x: Tensor) -> Tensor:
    return ad.sqrt((x * x).sum())


def cosine_sim_scaled(x, y, t: float) -> Tensor:
    """Cosine similarity divided by the temperature."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    nx, ny = np.linalg.norm(x.data), np.linalg.norm(y.data)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return (x * y).sum() / (_norm(x) * _norm(y) * t)


def similarity_matrix(Z: Tensor, t: float) -> Tensor:
    """(m, m) matrix of scaled cosine similarities between rows of ``Z``."""
    norms = np.linalg.norm(Z.data, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine similarity of a zero-norm vector")
    unit = Z / ad.sqrt((Z * Z).sum(axis=1, keepdims=True))
    return (unit @ unit.transpose()) * (1.0 / t)


def _scores(anchor, positive, negatives, t):
    a = ad.as_tensor(anchor)
    s_pos = cosine_sim_scaled(a, positive, t)
    s_neg = [cosine_sim_scaled(a, k, t) for k in negatives]
    return s_pos, s_neg


# -- per-anchor losses ----------------------------------------------------------------

def info_nce_from_scores(s_pos: Tensor, s_neg: Tensor, precision: str = "double") -> Tensor:
    """-log(e^{s+} / (e^{s+} + sum e^{s-})) for a 1-D ``s_neg`` (may be empty)."""
    if s_neg.size == 0:
        return s_pos * 0.0
    if precision == "single":
        e_pos = ad.exp(s_pos)
        return -ad.log(e_pos / (e_pos + ad.exp(s_neg).sum()))
    return ad.logsumexp(ad.concat([s_pos.reshape(1), s_neg])) - s_pos


def cz_nce_from_scores(s_pos: Tensor, s_neg: Tensor, precision: str = "double") -> Tensor:
    """-log(e^{s+} / sum e^{s-}); needs at least one negative."""
    if s_neg.size == 0:
        raise ValueError("CZ-NCE needs at least one negative sample")
    if precision == "single":
        return -ad.log(ad.exp(s_pos) / ad.exp(s_neg).sum())
    return ad.logsumexp(s_neg) - s_pos


def rho_from_scores(s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """phi / sg(phi) with phi = sum exp(s- - s+): value 1, gradient of log(phi)."""
    if s_neg.size == 0:
        raise ValueError("rho loss needs at least one negative sample")
    phi = ad.exp(s_neg - s_pos).sum()
    return phi / ad.stop_gradient(phi)


def _stack(scalars) -> Tensor:
    if not scalars:
        return Tensor(np.zeros(0))
    return ad.concat([s.reshape(1) for s in scalars])


def info_nce_anchor(anchor, positive, negatives, t: float = 0.07, precision: str = "double") -> Tensor:
    with _precision(precision):
        s_pos, s_neg = _scores(anchor, positive, negatives, t)
        return info_nce_from_scores(s_pos, _stack(s_neg), precision)


def cz_nce_anchor(anchor, positive, negatives, t: float = 0.07, precision: str = "double") -> Tensor:
    if len(negatives) == 0:
        raise ValueError("CZ-NCE needs at least one negative sample")
    with _precision(precision):
        s_pos, s_neg = _scores(anchor, positive, negatives, t)
        return cz_nce_from_scores(s_pos, _stack(s_neg), precision)


def rho_loss(anchor, positive, negatives, t: float = 0.07) -> Tensor:
    if len(negatives) == 0:
        raise ValueError("rho loss needs at least one negative sample")
    s_pos, s_neg = _scores(anchor, positive, negatives, t)
    return rho_from_scores(s_pos, _stack(s_neg))


# -- batch losses ----------------------------------------------------------------------

def batch_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive column per anchor row and the (2n, 2n-2) negative columns."""
    m = 2 * n
    pos = np.concatenate([np.arange(n, m), np.arange(n)])
    neg = np.array([[j for j in range(m) if j != i and j != pos[i]] for i in range(m)],
                   dtype=np.int64).reshape(m, m - 2)
    return pos, neg


def batch_scores(X, Y, t: float) -> tuple[Tensor, Tensor]:
    """Positive scores (2n,) and negative scores (2n, 2n-2) for every anchor."""
    X, Y = ad.as_tensor(X), ad.as_tensor(Y)
    if X.shape != Y.shape or X.ndim != 2:
        raise ValueError(f"CCE batches must be matching (n, dim) arrays, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    S = similarity_matrix(ad.concat([X, Y], axis=0), t)
    pos, neg = batch_indices(n)
    rows = np.arange(2 * n)
    return S[rows, pos], S[rows[:, None], neg]


def anchor_losses(X, Y, kind: str, t: float = 0.07, precision: str = "double") -> Tensor:
    """(2n,) per-anchor losses, x-anchors first."""
    kind = normalize_kind(kind)
    n = ad.as_tensor(X).shape[0]
    if kind == CZ_NCE and n < 2:
        raise ValueError("CZ-NCE needs a batch of at least 2 pairs")
    with _precision(precision):
        s_pos, s_neg = batch_scores(X, Y, t)
        if n == 1:
            return s_pos * 0.0
        if precision == "single":
            e_pos = ad.exp(s_pos)
            e_neg = ad.exp(s_neg).sum(axis=1)
            if kind == INFO_NCE:
                return -ad.log(e_pos / (e_pos + e_neg))
            return -ad.log(e_pos / e_neg)
        if kind == INFO_NCE:
            return ad.logsumexp(ad.concat([s_pos.reshape(2 * n, 1), s_neg], axis=1), axis=1) - s_pos
        return ad.logsumexp(s_neg, axis=1) - s_pos


def batch_contrastive_loss(X, Y, config: LossConfig) -> Tensor:
    """Mean of the 2n anchor losses (x and y directions)."""
    with _precision(config.precision):
        return anchor_losses(X, Y, config.kind, config.temperature, config.precision).mean()


def batch_rho_loss(X, Y, t: float = 0.07) -> Tensor:
    """Mean over anchors of phi/sg(phi); forward value 1, gradient equal to the CZ-NCE batch loss."""
    n = ad.as_tensor(X).shape[0]
    if n < 2:
        raise ValueError("rho loss needs a batch of at least 2 pairs")
    s_pos, s_neg = batch_scores(X, Y, t)
    phi = ad.exp(s_neg - s_pos.reshape(2 * n, 1)).sum(axis=1)
    return (phi / ad.stop_gradient(phi)).mean()


# -- MLM ----------------------------------------------------------------------------------

def mask_tokens(ids: np.ndarray, mask: np.ndarray, vocab_size: int, rng: np.random.Generator,
                mask_rate: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT masking over non-special positions.

    Returns (corrupted ids, flat positions of predicted tokens, their original ids).
    Of the selected positions 80% become [MASK], 10% a random token, 10% stay.
    """
    ids = np.asarray(ids)
    eligible = mask & (ids != CLS_ID) & (ids != SEP_ID)
    u = rng.random(ids.shape)
    chosen = eligible & (u < mask_rate)
    action = rng.random(ids.shape)
    random_ids = rng.integers(5, vocab_size, size=ids.shape)
    out = ids.copy()
    out[chosen & (action < 0.8)] = MASK_ID
    swap = chosen & (action >= 0.8) & (action < 0.9)
    out[swap] = random_ids[swap]
    flat = np.flatnonzero(chosen)
    return out, flat, ids.reshape(-1)[flat]


def mlm_loss(ids: np.ndarray, mask: np.ndarray, params, config, rng: np.random.Generator,
             mask_rate: float = 0.15) -> Tensor:
    """Masked-token cross-entropy with the output layer tied to the token embeddings."""
    if ids.shape[0] == 0:
        raise ValueError("MLM batch is empty")
    corrupted, flat, targets = mask_tokens(ids, mask, config.vocab_size, rng, mask_rate)
    if flat.size == 0:
        return Tensor(0.0)
    out = encode_batch(corrupted, mask, params, config)
    h = out.last.reshape(-1, config.d)[flat]
    logits = h @ params["tok_emb"].transpose() + params["mlm.b"]
    return ad.softmax_cross_entropy(logits, targets)


def total_loss(contrastive: Tensor, mlm: Tensor, config: LossConfig) -> Tensor:
    """Contrastive batch loss plus alpha times the MLM loss."""
    if config.alpha == 0:
        return contrastive
    return contrastive + mlm * config.alpha
