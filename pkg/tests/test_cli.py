import json

import pytest

from mlctl.cli import blob_hash, main

TINY = {"encoder": {"layers": 1, "heads": 2, "d": 16, "ffn": 32}, "steps": 3, "batch_size": 4}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["make-synthetic", "--vocab", "20", "--sentences", "30", "--heldout", "10",
                 "--seed", "3", "--out", str(root / "syn")]) == 0
    assert main(["build-wps", "--corpus", str(root / "syn/corpus.tsv"), "--dict", str(root / "syn/dict.tsv"),
                 "--vocab-size", "120", "--out", str(root / "wps")]) == 0
    assert main(["build-wps", "--corpus", str(root / "syn/heldout.tsv"), "--dict", str(root / "syn/dict.tsv"),
                 "--vocab", str(root / "wps/vocab.txt"), "--out", str(root / "held")]) == 0
    return root, cfg


def train_args(root, cfg, out, *extra):
    return ["pretrain", "--wps", str(root / "wps/wps.jsonl"), "--vocab", str(root / "wps/vocab.txt"),
            "--config", str(cfg), "--out", str(out), *extra]


def test_blob_hash_matches_git():
    # git hash-object of "hello\n"
    assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_make_synthetic_files(pipeline):
    root, _ = pipeline
    assert len((root / "syn/corpus.tsv").read_text().splitlines()) == 30
    assert len((root / "syn/heldout.tsv").read_text().splitlines()) == 10
    assert len((root / "syn/dict.tsv").read_text().splitlines()) == 20
    manifest = json.loads((root / "syn/manifest.json").read_text())
    assert manifest["subcommand"] == "make-synthetic" and manifest["seed"] == 3


def test_build_wps_on_demo_fixture(tmp_path, capsys):
    assert main(["build-wps", "--demo", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "rejections:" in out and "a_spaced_count: 1" in out
    assert (tmp_path / "wps.jsonl").read_text().strip()


def test_build_wps_empty_dictionary(tmp_path, pipeline):
    root, _ = pipeline
    (tmp_path / "empty.tsv").write_text("")
    assert main(["build-wps", "--corpus", str(root / "syn/corpus.tsv"), "--dict", str(tmp_path / "empty.tsv"),
                 "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o/wps.jsonl").read_text() == ""


def test_missing_file_exit_code(tmp_path, capsys):
    missing = str(tmp_path / "absent.tsv")
    assert main(["build-wps", "--corpus", missing, "--dict", missing, "--out", str(tmp_path)]) == 2
    assert missing in capsys.readouterr().err


def test_invalid_loss_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["pretrain", "--loss", "triplet"])
    assert info.value.code == 2
    assert "infonce" in capsys.readouterr().err


def test_bad_config_json(tmp_path, pipeline):
    root, _ = pipeline
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(train_args(root, bad, tmp_path / "o")) == 2


def test_pretrain_flag_mapping(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(train_args(root, cfg, tmp_path, "--loss", "infonce", "--mode", "snt-only")) == 0
    tc = json.loads((tmp_path / "train_config.json").read_text())
    assert tc["loss"]["kind"] == "infonce" and tc["mode"] == "snt-only"
    assert tc["steps"] == 3 and tc["encoder"]["d"] == 16


def test_pretrain_is_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    for name in ("a", "b"):
        assert main(train_args(root, cfg, tmp_path / name, "--seed", "5")) == 0
    for f in ("telemetry.csv", "final.ckpt", "train_config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a/manifest.json").read_text())
    mb = json.loads((tmp_path / "b/manifest.json").read_text())
    assert ma["input_hash"] == mb["input_hash"] and ma["seed"] == 5


def test_eval_and_export(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(train_args(root, cfg, tmp_path / "pt")) == 0
    ck = str(tmp_path / "pt/final.ckpt")
    vocab = str(root / "wps/vocab.txt")
    assert main(["eval-retrieval", "--checkpoint", ck, "--wps", str(root / "held/wps.jsonl"),
                 "--vocab", vocab, "--out", str(tmp_path / "ev")]) == 0
    rows = json.loads((tmp_path / "ev/retrieval.json").read_text())
    assert [r["level"] for r in rows] == ["sentence", "word"]
    assert main(["eval-retrieval", "--checkpoint", ck, "--wps", str(root / "held/wps.jsonl"),
                 "--vocab", vocab, "--min-word", "1.01", "--out", str(tmp_path / "ev2")]) == 1
    items = tmp_path / "items.tsv"
    first = (root / "syn/corpus.tsv").read_text().splitlines()[0].split("\t")
    items.write_text(f"x\tA\tg\t{first[0]}\ny\tB\tg\t{first[1]}\t0\t1\n")
    assert main(["export-embeddings", "--checkpoint", ck, "--vocab", vocab, "--items", str(items),
                 "--out", str(tmp_path / "ex")]) == 0
    lines = (tmp_path / "ex/embeddings.tsv").read_text().splitlines()
    assert len(lines) == 3 and all(len(l.split("\t")) == 16 + 3 for l in lines)


def test_grad_check(tmp_path):
    assert main(["grad-check", "--batches", "3", "--dim", "8", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "grad_report.json").read_text())["passed"] is True


def test_loss_probe_and_ablation_outputs(pipeline, tmp_path):
    root, cfg = pipeline
    wps, vocab = str(root / "wps/wps.jsonl"), str(root / "wps/vocab.txt")
    code = main(["loss-probe", "--wps", wps, "--vocab", vocab, "--config", str(cfg), "--loss", "infonce",
                 "--probe-steps", "2", "--out", str(tmp_path / "lp")])
    assert code == 1  # two steps cannot reach the floor
    assert len((tmp_path / "lp/probe.csv").read_text().splitlines()) == 1 + 3 * 2
    code = main(["ablation", "--wps", wps, "--heldout", str(root / "held/wps.jsonl"), "--vocab", vocab,
                 "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "ab")])
    assert code in (0, 1)
    assert len((tmp_path / "ab/ablation.csv").read_text().splitlines()) == 1 + 16
