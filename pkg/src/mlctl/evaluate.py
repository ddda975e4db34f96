"""Gradient-identity checks, the float32 loss probe, synthetic retrieval and ablations."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import (EncoderConfig, TokenCache, encode_batch, encode_wps_batch, init_params,
                      pad_batch, sentence_embedding, word_embedding)
from .losses import CZ_NCE, INFO_NCE, LossConfig, batch_contrastive_loss, batch_rho_loss
from .trainer import TrainConfig, Trainer, encoder_config_for, telemetry_csv
from .tokenizer import Vocab

logger = logging.getLogger(__name__)


def rel_dev(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / (|a| + floor), elementwise."""
    return float(np.max(np.abs(a - b) / (np.abs(a) + floor)))


# -- gradient identity --------------------------------------------------------------------

@dataclass
class GradReport:
    max_dev_rho: float
    max_dev_fd: float
    max_rho_offset: float
    batches: list[tuple[int, int]]
    precision: str = "double"

    def passed(self, rho_tol: float = 1e-10, fd_tol: float = 1e-5, value_tol: float = 1e-12) -> bool:
        return self.max_dev_rho < rho_tol and self.max_dev_fd < fd_tol and self.max_rho_offset < value_tol


def _cz_batch_value_ld(Z: np.ndarray, t: float) -> np.longdouble:
    """CZ-NCE batch loss by direct summation in extended precision (finite-difference oracle)."""
    Z = Z.astype(np.longdouble)
    m = Z.shape[0]
    n = m // 2
    norms = np.sqrt((Z * Z).sum(axis=1))
    total = np.longdouble(0)
    for i in range(m):
        p = i + n if i < n else i - n
        sims = (Z @ Z[i]) / (norms * norms[i] * np.longdouble(t))
        negs = [sims[j] for j in range(m) if j != i and j != p]
        total += np.log(np.sum(np.exp(np.array(negs) - sims[p])))
    return total / m


def finite_difference_grad(Z: np.ndarray, t: float, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(Z)
    Zl = Z.astype(np.longdouble)
    for idx in np.ndindex(*Z.shape):
        up = Zl.copy()
        dn = Zl.copy()
        up[idx] += np.longdouble(h)
        dn[idx] -= np.longdouble(h)
        g[idx] = float((_cz_batch_value_ld(up, t) - _cz_batch_value_ld(dn, t)) / (2 * np.longdouble(h)))
    return g


def grad_equivalence_check(batches: Sequence[tuple[np.ndarray, np.ndarray]], t: float = 0.07,
                           with_fd: bool = True, h: float = 1e-6) -> GradReport:
    """Compare gradients of the CZ-NCE batch loss and of phi/sg(phi) w.r.t. the CCE rows.

    The finite-difference side evaluates the CZ-NCE loss with a separate
    extended-precision implementation.
    """
    dev_rho = dev_fd = offset = 0.0
    shapes = []
    for X0, Y0 in batches:
        shapes.append(tuple(X0.shape))
        X, Y = ad.parameter(X0), ad.parameter(Y0)
        batch_contrastive_loss(X, Y, LossConfig(temperature=t, kind=CZ_NCE)).backward()
        g_cz = np.concatenate([X.grad, Y.grad])
        X, Y = ad.parameter(X0), ad.parameter(Y0)
        rho = batch_rho_loss(X, Y, t)
        offset = max(offset, abs(rho.item() - 1.0))
        rho.backward()
        g_rho = np.concatenate([X.grad, Y.grad])
        dev_rho = max(dev_rho, rel_dev(g_cz, g_rho))
        if with_fd:
            dev_fd = max(dev_fd, rel_dev(g_cz, finite_difference_grad(np.concatenate([X0, Y0]), t, h)))
    return GradReport(dev_rho, dev_fd if with_fd else float("nan"), offset, shapes)


def random_cce_batches(count: int, dim: int = 128, sizes=(2, 4, 8), seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n = sizes[i % len(sizes)]
        X = rng.normal(size=(n, dim))
        Y = X + 0.5 * rng.normal(size=(n, dim))
        out.append((X, Y))
    return out


def encoder_grad_check(trainer: Trainer, batch) -> float:
    """Max relative deviation between parameter gradients of the CZ-NCE and rho batch losses."""
    n = len(batch)
    wpss = [p.s for p in batch] + [p.t for p in batch]
    grads = []
    for form in ("cz", "rho"):
        for p in trainer.params.values():
            p.grad = None
        C = encode_wps_batch(wpss, trainer.tokens, trainer.params, trainer.enc)
        if form == "cz":
            loss = batch_contrastive_loss(C[:n], C[n:], LossConfig(kind=CZ_NCE, alpha=0.0))
        else:
            loss = batch_rho_loss(C[:n], C[n:])
        g = ad.backward(loss, trainer.params)
        grads.append(np.concatenate([g[k].ravel() for k in sorted(g)]))
    return rel_dev(grads[0], grads[1])


# -- float32 probe ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    rows: list[dict]
    underflow_step: int | None
    loss_zero_step: int | None
    floor_step: int | None
    double_underflow: bool
    steps: int
    batch_size: int

    def row_at(self, kind: str, step: int, precision: str = "single") -> dict:
        for r in self.rows:
            if r["loss_kind"] == kind and r["step"] == step and r["precision"] == precision:
                return r
        raise KeyError((kind, step, precision))


def _probe_run(pairs, vocab, base: TrainConfig, kind: str, precision: str, steps: int):
    cfg = TrainConfig.from_dict({**base.to_dict(), "steps": steps,
                                 "loss": {**base.loss.__dict__, "kind": kind, "precision": precision, "alpha": 0.0}})
    tr = Trainer(pairs, vocab, cfg)
    rows = []
    for _ in range(steps):
        row = tr.step()
        n = cfg.batch_size
        X, Y = tr.last_cce[:n], tr.last_cce[n:]
        other = INFO_NCE if kind == CZ_NCE else CZ_NCE
        other_loss = batch_contrastive_loss(X, Y, LossConfig(kind=other, precision=precision,
                                                             temperature=cfg.loss.temperature)).item()
        row = dict(row, loss_kind=kind, other_loss=other_loss)
        rows.append(row)
    return rows


def loss_floor_probe(pairs, vocab: Vocab, base: TrainConfig, steps: int) -> ProbeReport:
    """Paired infoNCE / CZ-NCE runs from identical init with float32-emulated loss computation.

    A double-precision infoNCE control run covers the same horizon.
    """
    if base.batch_size > 8:
        raise ValueError("the loss-floor probe is meant for small batches (n <= 8)")
    info = _probe_run(pairs, vocab, base, INFO_NCE, "single", steps)
    cz = _probe_run(pairs, vocab, base, CZ_NCE, "single", steps)
    ctrl = _probe_run(pairs, vocab, base, INFO_NCE, "double", steps)
    underflow = next((r["step"] for r in info if r["contrastive"] < 1e-5 and r["grad_norm"] == 0.0), None)
    zero = next((r["step"] for r in info if r["contrastive"] == 0.0), None)
    floor = next((r["step"] for r in info if r["contrastive"] < 1e-5), None)
    double_underflow = any(r["grad_norm"] == 0.0 for r in ctrl)
    return ProbeReport(info + cz + ctrl, underflow, zero, floor, double_underflow, steps, base.batch_size)


def probe_csv(report: ProbeReport) -> str:
    return telemetry_csv(report.rows, extra_fields=["loss_kind", "other_loss"])


# -- retrieval ------------------------------------------------------------------------------

@dataclass
class RetrievalReport:
    level: str
    acc_ab: float
    acc_ba: float
    n: int
    tag: str = ""


def embed_items(wpss: Sequence, level: str, params, config: EncoderConfig, tokens: TokenCache,
                chunk: int = 64) -> np.ndarray:
    """Raw encoder vectors (FC head bypassed): sentence or word-span pooling."""
    if level not in ("sentence", "word"):
        raise ValueError(f"level must be 'sentence' or 'word', got {level!r}")
    out = []
    with ad.no_grad():
        for k in range(0, len(wpss), chunk):
            part = wpss[k:k + chunk]
            ids, mask = pad_batch([tokens(w.sentence.raw).ids for w in part], config)
            layers = encode_batch(ids, mask, params, config)
            if level == "sentence":
                v = sentence_embedding(layers, config.include_specials)
            else:
                v = word_embedding(layers, [w.token_span for w in part])
            out.append(v.data)
    return np.concatenate(out) if out else np.zeros((0, config.d))


def top1_accuracy(A: np.ndarray, B: np.ndarray) -> float:
    """Fraction of rows i of A whose cosine nearest neighbour in B is row i; ties go to the lowest index."""
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    nearest = np.argmax(An @ Bn.T, axis=1)
    return float(np.mean(nearest == np.arange(len(A))))


def retrieval_eval(params, config: EncoderConfig, vocab: Vocab, heldout: Sequence, level: str,
                   tag: str = "") -> RetrievalReport:
    if len(heldout) < 2:
        raise ValueError("retrieval needs at least 2 held-out pairs")
    tokens = TokenCache(vocab)
    A = embed_items([p.s for p in heldout], level, params, config, tokens)
    B = embed_items([p.t for p in heldout], level, params, config, tokens)
    return RetrievalReport(level, top1_accuracy(A, B), top1_accuracy(B, A), len(heldout), tag)


def one_per_sentence(wps_pairs: Sequence) -> list:
    """First qualifying WPS pair of each sentence pair, in corpus order."""
    seen = set()
    out = []
    for p in wps_pairs:
        key = (p.s.sentence.raw, p.t.sentence.raw)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


# -- ablation -------------------------------------------------------------------------------

SYSTEMS = {
    "baseline": None,
    "info-snt": (INFO_NCE, "snt-only"),
    "CZ-snt": (CZ_NCE, "snt-only"),
    "ML-CTL-CZ": (CZ_NCE, "multi-level"),
}


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def acc(self, system: str, level: str, direction: str = "mean") -> float:
        vals = [r["accuracy"] for r in self.rows if r["system"] == system and r["level"] == level
                and (direction == "mean" or r["direction"] == direction)]
        return float(np.mean(vals))

    def to_csv(self) -> str:
        lines = ["system,level,direction,accuracy"]
        for r in self.rows:
            lines.append(f"{r['system']},{r['level']},{r['direction']},{r['accuracy']!r}")
        return "\n".join(lines) + "\n"


def ablation_suite(train_pairs, heldout, vocab: Vocab, base: TrainConfig) -> AblationReport:
    """Train info-snt, CZ-snt and ML-CTL-CZ from a shared init and compare retrieval.

    The untrained baseline shares the encoder initialisation. Orderings are
    checked by the caller; CZ-snt below info-snt only produces a warning here.
    """
    report = AblationReport()
    for name, spec in SYSTEMS.items():
        if spec is None:
            enc = encoder_config_for(vocab, base)
            params = init_params(enc, base.init_seed)
        else:
            kind, mode = spec
            cfg = TrainConfig.from_dict({**base.to_dict(), "mode": mode,
                                         "loss": {**base.loss.__dict__, "kind": kind}})
            tr = Trainer(train_pairs, vocab, cfg)
            tr.run()
            params, enc = tr.params, tr.enc
        for level in ("sentence", "word"):
            rep = retrieval_eval(params, enc, vocab, heldout, level, tag=name)
            report.rows.append({"system": name, "level": level, "direction": "A->B", "accuracy": rep.acc_ab})
            report.rows.append({"system": name, "level": level, "direction": "B->A", "accuracy": rep.acc_ba})
        logger.info("%s: sentence %.3f word %.3f", name, report.acc(name, "sentence"), report.acc(name, "word"))
    if report.acc("CZ-snt", "sentence") < report.acc("info-snt", "sentence"):
        msg = "CZ-snt scored below info-snt on sentence retrieval"
        report.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    return report


# -- embedding export -------------------------------------------------------------------------

@dataclass
class ExportItem:
    label: str
    lang: str
    group: str
    text: str
    token_span: tuple[int, int] | None = None


def export_embeddings(params, config: EncoderConfig, vocab: Vocab, items: Sequence[ExportItem], path) -> int:
    """Write ``label, lang, group, v_1 ... v_d`` rows (TSV with a header)."""
    tokens = TokenCache(vocab)
    header = ["label", "lang", "group"] + [f"v{i}" for i in range(config.d)]
    rows = []
    if items:
        with ad.no_grad():
            ids, mask = pad_batch([tokens(it.text).ids for it in items], config)
            layers = encode_batch(ids, mask, params, config)
            sent = sentence_embedding(layers, config.include_specials).data
            vecs = sent.copy()
            spans = [(i, it.token_span) for i, it in enumerate(items) if it.token_span is not None]
            if spans:
                idx = [i for i, _ in spans]
                sub = type(layers)([h[idx] for h in layers.layers], layers.mask[idx])
                vecs[idx] = word_embedding(sub, [s for _, s in spans]).data
        rows = [[it.label, it.lang, it.group] + [repr(float(x)) for x in v] for it, v in zip(items, vecs)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return len(rows)
