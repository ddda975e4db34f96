"""Contrastive pre-training loop: WPS batches -> encoder -> losses -> Adam."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, TokenCache, encode_wps_batch, init_params, pad_batch
from .losses import CZ_NCE, LossConfig, batch_contrastive_loss, mlm_loss, total_loss
from .tokenizer import Vocab

logger = logging.getLogger(__name__)

MODES = ("multi-level", "snt-only")
TELEMETRY_FIELDS = ["step", "kind", "contrastive", "mlm", "total", "grad_norm", "precision"]

# full-scale reference settings; desk-scale defaults differ
REFERENCE_LR = 2e-6
REFERENCE_BATCH_SIZE = 64
REFERENCE_ALPHA = 0.1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 300
    lr: float = 1e-3
    seed: int = 0
    init_seed: int = 0
    mode: str = "multi-level"
    checkpoint_interval: int = 0
    mask_rate: float = 0.15
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss.kind == CZ_NCE and self.batch_size < 2:
            raise ValueError("CZ-NCE needs a batch size of at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_batches(pairs: Sequence, n: int, seed: int) -> list[list]:
    """Seeded shuffle, then consecutive chunks of ``n``; the short tail is dropped."""
    if len(pairs) < n:
        raise ValueError(f"need at least {n} pairs to form a batch, got {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [[pairs[i] for i in order[k:k + n]] for k in range(0, len(pairs) - n + 1, n)]


def encoder_config_for(vocab: Vocab, config: TrainConfig) -> EncoderConfig:
    return EncoderConfig(vocab_size=len(vocab), snt_only=(config.mode == "snt-only"), **config.encoder)


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    """Owns parameters and optimizer state for one pre-training run.

    Batch order and MLM masks are derived from ``(seed, epoch)`` and
    ``(seed, step)`` respectively, so a run can resume from any step.
    """

    def __init__(self, pairs: Sequence, vocab: Vocab, config: TrainConfig,
                 params: dict | None = None, encoder_config: EncoderConfig | None = None):
        if not pairs:
            raise ValueError("no WPS pairs to train on")
        self.pairs = list(pairs)
        self.vocab = vocab
        self.config = config
        self.enc = encoder_config or encoder_config_for(vocab, config)
        self.params = params if params is not None else init_params(self.enc, config.init_seed)
        self.opt = ad.Adam(lr=config.lr)
        self.step_index = 0
        self.tokens = TokenCache(vocab)
        self.telemetry: list[dict] = []
        self._epoch_cache: tuple[int, list] | None = None
        self.batches_per_epoch = len(self.pairs) // config.batch_size
        if self.batches_per_epoch == 0:
            raise ValueError(f"need at least {config.batch_size} pairs to form a batch, got {len(self.pairs)}")

    def batch_for(self, step: int) -> list:
        epoch, k = divmod(step, self.batches_per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            seed = int(np.random.SeedSequence([self.config.seed, epoch]).generate_state(1)[0])
            self._epoch_cache = (epoch, make_batches(self.pairs, self.config.batch_size, seed))
        return self._epoch_cache[1][k]

    def forward(self, batch: Sequence, loss_config: LossConfig | None = None, rng=None):
        """(total, contrastive, mlm, cce) for one batch of parallel pairs."""
        lc = loss_config or self.config.loss
        n = len(batch)
        wpss = [p.s for p in batch] + [p.t for p in batch]
        C = encode_wps_batch(wpss, self.tokens, self.params, self.enc)
        ctl = batch_contrastive_loss(C[:n], C[n:], lc)
        if lc.alpha > 0:
            ids, mask = pad_batch([self.tokens(w.sentence.raw).ids for w in wpss], self.enc)
            mlm = mlm_loss(ids, mask, self.params, self.enc, rng, self.config.mask_rate)
        else:
            mlm = ad.Tensor(0.0)
        return total_loss(ctl, mlm, lc), ctl, mlm, C

    def step(self) -> dict:
        k = self.step_index
        batch = self.batch_for(k)
        rng = np.random.default_rng([self.config.seed, k, 1])
        for p in self.params.values():
            p.grad = None
        total, ctl, mlm, C = self.forward(batch, rng=rng)
        grads = ad.backward(total, self.params)
        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if not np.isfinite(total.item()) or not np.isfinite(gnorm):
            raise FloatingPointError(f"non-finite loss or gradient at step {k}")
        self.opt.step(self.params, grads)
        self.step_index += 1
        row = {
            "step": k,
            "kind": self.config.loss.kind,
            "contrastive": ctl.item(),
            "mlm": mlm.item(),
            "total": total.item(),
            "grad_norm": gnorm,
            "precision": self.config.loss.precision,
        }
        self.telemetry.append(row)
        self.last_cce = C.data
        return row

    def run(self, steps: int | None = None, out_dir: str | None = None) -> list[dict]:
        """Train until ``steps`` total steps have been taken, checkpointing into ``out_dir``.

        A non-finite loss or gradient is detected before the optimizer
        touches the parameters, so the state saved on abort is the last good one.
        """
        target = self.config.steps if steps is None else steps
        interval = self.config.checkpoint_interval
        while self.step_index < target:
            try:
                self.step()
            except FloatingPointError as exc:
                path = None
                if out_dir is not None:
                    path = os.path.join(out_dir, "last_good.ckpt")
                    self.save(path)
                raise TrainingDiverged(str(exc), path) from exc
            if out_dir is not None and interval and self.step_index % interval == 0:
                self.save(os.path.join(out_dir, f"step{self.step_index:06d}.ckpt"))
        if out_dir is not None:
            self.save(os.path.join(out_dir, "final.ckpt"))
            write_telemetry(self.telemetry, os.path.join(out_dir, "telemetry.csv"))
        return self.telemetry

    # -- checkpoints --------------------------------------------------------------------
    def save(self, path) -> None:
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays.update(self.opt.state_arrays())
        meta = {
            "step": self.step_index,
            "config_hash": self.config.hash(),
            "train_config": self.config.to_dict(),
            "encoder_config": asdict(self.enc),
            "adam": self.opt.state_meta(),
            "rng": {"seed": self.config.seed, "next_step": self.step_index},
            "telemetry": self.telemetry,
        }
        ad.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path, pairs, vocab: Vocab) -> "Trainer":
        arrays, meta = ad.load_arrays(path)
        config = TrainConfig.from_dict(meta["train_config"])
        enc = EncoderConfig.from_dict(meta["encoder_config"])
        params = {k[len("param/"):]: ad.parameter(v, name=k[len("param/"):])
                  for k, v in arrays.items() if k.startswith("param/")}
        tr = cls(pairs, vocab, config, params=params, encoder_config=enc)
        tr.opt = ad.Adam.from_state(meta["adam"], arrays)
        tr.step_index = int(meta["step"])
        tr.telemetry = list(meta.get("telemetry", []))
        return tr


def load_params(path) -> tuple[dict, EncoderConfig]:
    arrays, meta = ad.load_arrays(path)
    params = {k[len("param/"):]: ad.parameter(v, name=k[len("param/"):])
              for k, v in arrays.items() if k.startswith("param/")}
    return params, EncoderConfig.from_dict(meta["encoder_config"])


def telemetry_csv(rows, extra_fields: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    fields = TELEMETRY_FIELDS + list(extra_fields)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
    return buf.getvalue()


def write_telemetry(rows, path, extra_fields: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(telemetry_csv(rows, extra_fields))


def train(pairs, vocab: Vocab, config: TrainConfig, out_dir: str | None = None,
          params: dict | None = None) -> Trainer:
    """Run a full pre-training job and return the finished trainer."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    tr = Trainer(pairs, vocab, config, params=params)
    tr.run(out_dir=out_dir)
    return tr
