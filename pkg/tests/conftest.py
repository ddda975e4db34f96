import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mlctl.corpus import make_synthetic_bitext  # noqa: E402
from mlctl.losses import LossConfig  # noqa: E402
from mlctl.tokenizer import build_vocab  # noqa: E402
from mlctl.trainer import TrainConfig  # noqa: E402
from mlctl.wps import build_corpus_wps  # noqa: E402

TINY_ENCODER = dict(layers=1, heads=2, d=16, ffn=32, max_len=64)


@pytest.fixture(scope="session")
def tiny_setup():
    pairs, d = make_synthetic_bitext(20, 30, seed=11)
    vocab = build_vocab([p.a.raw for p in pairs] + [p.b.raw for p in pairs], 120)
    return pairs, d, vocab, build_corpus_wps(pairs, d, vocab)


def tiny_config(**kw) -> TrainConfig:
    base = dict(batch_size=4, steps=6, lr=1e-3, seed=0, loss=LossConfig(), encoder=dict(TINY_ENCODER))
    base.update(kw)
    return TrainConfig(**base)
