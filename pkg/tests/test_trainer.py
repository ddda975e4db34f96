import numpy as np
import pytest

from mlctl import autodiff as ad
from mlctl.losses import LossConfig
from mlctl.trainer import (TELEMETRY_FIELDS, TrainConfig, Trainer, TrainingDiverged, load_params,
                           make_batches, telemetry_csv, train)

from conftest import tiny_config


def test_make_batches_partition():
    batches = make_batches(list(range(10)), 3, seed=1)
    assert [len(b) for b in batches] == [3, 3, 3]
    flat = [x for b in batches for x in b]
    assert len(set(flat)) == 9


def test_make_batches_seeded():
    assert make_batches(list(range(20)), 4, 5) == make_batches(list(range(20)), 4, 5)
    assert make_batches(list(range(20)), 4, 5) != make_batches(list(range(20)), 4, 6)


def test_make_batches_too_few():
    with pytest.raises(ValueError, match="at least 4"):
        make_batches([1, 2], 4, 0)


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="word-only")
    with pytest.raises(ValueError, match="at least 2"):
        TrainConfig(batch_size=1)
    TrainConfig(batch_size=1, loss=LossConfig(kind="infonce"))


def test_config_dict_round_trip():
    c = tiny_config(mode="snt-only")
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.hash() == TrainConfig.from_dict(c.to_dict()).hash()


def test_telemetry_rows(tiny_setup):
    *_, wps = tiny_setup
    rows = Trainer(wps, tiny_setup[2], tiny_config()).run()
    assert len(rows) == 6
    assert [r["step"] for r in rows] == list(range(6))
    assert set(TELEMETRY_FIELDS) <= set(rows[0])
    for r in rows:
        assert r["total"] == pytest.approx(r["contrastive"] + 0.1 * r["mlm"])


def test_loss_decreases(tiny_setup):
    *_, vocab, wps = tiny_setup
    rows = Trainer(wps, vocab, tiny_config(steps=40, lr=3e-3)).run()
    assert np.mean([r["contrastive"] for r in rows[-5:]]) < np.mean([r["contrastive"] for r in rows[:5]])


def test_seeded_reruns_are_byte_identical(tiny_setup, tmp_path):
    *_, vocab, wps = tiny_setup
    train(wps, vocab, tiny_config(), str(tmp_path / "a"))
    train(wps, vocab, tiny_config(), str(tmp_path / "b"))
    assert (tmp_path / "a/telemetry.csv").read_bytes() == (tmp_path / "b/telemetry.csv").read_bytes()
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tiny_setup, tmp_path):
    *_, vocab, wps = tiny_setup
    full = Trainer(wps, vocab, tiny_config())
    full.run()
    half = Trainer(wps, vocab, tiny_config())
    half.run(steps=3)
    half.save(tmp_path / "mid.ckpt")
    resumed = Trainer.load(tmp_path / "mid.ckpt", wps, vocab)
    resumed.run()
    assert telemetry_csv(resumed.telemetry) == telemetry_csv(full.telemetry)
    for k in full.params:
        assert np.array_equal(full.params[k].data, resumed.params[k].data)


def test_periodic_checkpoints(tiny_setup, tmp_path):
    *_, vocab, wps = tiny_setup
    train(wps, vocab, tiny_config(checkpoint_interval=2), str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.ckpt", "step000002.ckpt", "step000004.ckpt", "step000006.ckpt", "telemetry.csv"]
    params, enc = load_params(tmp_path / "final.ckpt")
    assert enc.d == 16 and "fc.w" in params


def test_snt_only_mode(tiny_setup):
    *_, vocab, wps = tiny_setup
    tr = Trainer(wps, vocab, tiny_config(mode="snt-only", steps=2))
    tr.run()
    assert tr.params["fc.w"].shape == (16, 16)


def test_divergence_saves_last_good(tiny_setup, tmp_path, monkeypatch):
    *_, vocab, wps = tiny_setup
    tr = Trainer(wps, vocab, tiny_config())
    tr.run(steps=2)
    before = {k: v.data.copy() for k, v in tr.params.items()}
    real = ad.backward

    def poisoned(loss, params):
        g = real(loss, params)
        g["fc.b"] = g["fc.b"] * np.nan
        return g

    monkeypatch.setattr(ad, "backward", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        tr.run(out_dir=str(tmp_path))
    assert info.value.checkpoint.endswith("last_good.ckpt")
    params, _ = load_params(info.value.checkpoint)
    assert all(np.array_equal(params[k].data, before[k]) for k in before)


def test_empty_pairs_rejected(tiny_setup):
    with pytest.raises(ValueError, match="no WPS"):
        Trainer([], tiny_setup[2], tiny_config())
