"""Command-line entry point: one binary, one subcommand per pipeline stage.

Every subcommand writes its outputs and a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 threshold not met, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources

from .corpus import (CorpusFormatError, load_dictionary, load_parallel_corpus, load_stopwords,
                     make_synthetic_bitext, save_dictionary, save_parallel_corpus)
from .evaluate import (ExportItem, ablation_suite, export_embeddings, grad_equivalence_check,
                       loss_floor_probe, one_per_sentence, probe_csv, random_cce_batches,
                       retrieval_eval)
from .losses import LOSS_KINDS
from .tokenizer import Vocab, build_vocab
from .trainer import MODES, TrainConfig, load_params, train, write_telemetry
from .wps import build_corpus_wps, load_wps_jsonl, save_wps_jsonl

logger = logging.getLogger("mlctl")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    seed: int
    inputs: dict[str, str]
    outputs: list[str]
    input_hash: str
    timestamp: str
    argv: list[str] = field(default_factory=list)

    def write(self, out_dir: str) -> None:
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def blob_hash(data: bytes) -> str:
    """Content hash in the same form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(paths: dict[str, str]) -> str:
    h = hashlib.sha1()
    for name in sorted(paths):
        with open(paths[name], "rb") as fh:
            h.update(f"{name} {blob_hash(fh.read())}\n".encode())
    return h.hexdigest()


def demo_path(name: str) -> str:
    """Path of a file from the shipped demo fixture (corpus, dictionary, stop words, items)."""
    return str(resources.files("mlctl") / "data" / name)


# -- config handling -------------------------------------------------------------------------

def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def train_config(args, cfg: dict) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    d = {k: v for k, v in cfg.items() if k in {f.name for f in dataclasses.fields(TrainConfig)}}
    loss = dict(d.get("loss", {}))
    d["seed"] = args.seed
    d.setdefault("init_seed", args.seed)
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"), ("mode", "mode")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    if getattr(args, "loss", None) is not None:
        loss["kind"] = args.loss
    if getattr(args, "precision", None) is not None:
        loss["precision"] = args.precision
    d["loss"] = loss
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _require(path: str | None, what: str) -> str:
    if path is None:
        raise UsageError(f"--{what} is required")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- subcommands -------------------------------------------------------------------------------

def cmd_make_synthetic(args, cfg):
    out = _out(args)
    vocab = cfg.get("vocab", args.vocab)
    total = cfg.get("sentences", args.sentences) + cfg.get("heldout", args.heldout)
    pairs, d = make_synthetic_bitext(vocab, total, args.seed)
    train_n = total - args.heldout
    save_parallel_corpus(pairs[:train_n], os.path.join(out, "corpus.tsv"))
    save_dictionary(d, os.path.join(out, "dict.tsv"))
    outputs = ["corpus.tsv", "dict.tsv"]
    if args.heldout:
        save_parallel_corpus(pairs[train_n:], os.path.join(out, "heldout.tsv"))
        outputs.append("heldout.tsv")
    print(f"wrote {train_n} training pairs, {args.heldout} held-out pairs, {len(d)} dictionary entries to {out}")
    return EXIT_OK, {}, outputs


def cmd_build_wps(args, cfg):
    inputs = {"corpus": _require(args.corpus, "corpus"), "dict": _require(args.dict, "dict")}
    stop = set()
    if args.stopwords:
        inputs["stopwords"] = _require(args.stopwords, "stopwords")
        stop = load_stopwords(args.stopwords)
    pairs = load_parallel_corpus(args.corpus, args.lang_a, args.lang_b)
    d = load_dictionary(args.dict, stop, args.lang_a, args.lang_b)
    out = _out(args)
    if args.vocab:
        inputs["vocab"] = _require(args.vocab, "vocab")
        vocab = Vocab.load(args.vocab)
    else:
        size = cfg.get("vocab_size", args.vocab_size)
        vocab = build_vocab([p.a.raw for p in pairs] + [p.b.raw for p in pairs], size,
                            lowercase=cfg.get("lowercase", False))
    vocab.save(os.path.join(out, "vocab.txt"))
    stats = Counter()
    wps = build_corpus_wps(pairs, d, vocab, stats)
    save_wps_jsonl(wps, os.path.join(out, "wps.jsonl"))
    with open(os.path.join(out, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(stats.items())), fh, indent=2)
        fh.write("\n")
    print(f"{len(wps)} WPS pairs from {len(pairs)} sentence pairs, {len(d)} dictionary entries")
    print("rejections:")
    for key in ("a_absent", "a_spaced_count", "a_token_count", "b_spaced_count", "b_token_count"):
        print(f"  {key}: {stats[key]}")
    return EXIT_OK, inputs, ["vocab.txt", "wps.jsonl", "stats.json"]


def _load_wps_and_vocab(args):
    inputs = {"wps": _require(args.wps, "wps"), "vocab": _require(args.vocab, "vocab")}
    wps = load_wps_jsonl(args.wps)
    if not wps:
        raise UsageError(f"{args.wps}: no WPS pairs")
    return inputs, wps, Vocab.load(args.vocab)


def cmd_pretrain(args, cfg):
    inputs, wps, vocab = _load_wps_and_vocab(args)
    config = train_config(args, cfg)
    out = _out(args)
    with open(os.path.join(out, "train_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    tr = train(wps, vocab, config, out)
    last = tr.telemetry[-1]
    print(f"{config.loss.kind} / {config.mode}: {len(tr.telemetry)} steps, "
          f"final contrastive {last['contrastive']:.6g}, mlm {last['mlm']:.6g}")
    return EXIT_OK, inputs, ["train_config.json", "final.ckpt", "telemetry.csv"]


def cmd_grad_check(args, cfg):
    batches = random_cce_batches(cfg.get("batches", args.batches), cfg.get("dim", args.dim), seed=args.seed)
    rep = grad_equivalence_check(batches, t=cfg.get("temperature", 0.07), with_fd=not args.no_fd)
    out = _out(args)
    data = dataclasses.asdict(rep) | {"passed": rep.passed()}
    with open(os.path.join(out, "grad_report.json"), "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
    print(f"batches: {len(rep.batches)}  max dev (rho): {rep.max_dev_rho:.3e}  "
          f"max dev (fd): {rep.max_dev_fd:.3e}  |rho-1|: {rep.max_rho_offset:.3e}  passed: {rep.passed()}")
    return (EXIT_OK if rep.passed() else EXIT_THRESHOLD), {}, ["grad_report.json"]


def cmd_loss_probe(args, cfg):
    inputs, wps, vocab = _load_wps_and_vocab(args)
    if args.batch_size is None and "batch_size" not in cfg:
        args.batch_size = 4
    config = train_config(args, cfg)
    steps = cfg.get("probe_steps", args.probe_steps)
    rep = loss_floor_probe(wps, vocab, config, steps)
    out = _out(args)
    with open(os.path.join(out, "probe.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(probe_csv(rep))
    summary = {k: getattr(rep, k) for k in ("underflow_step", "loss_zero_step", "floor_step",
                                            "double_underflow", "steps", "batch_size")}
    cz_ok = None
    if rep.underflow_step is not None:
        r = rep.row_at("cz-nce", rep.underflow_step)
        cz_ok = abs(r["contrastive"]) > 1 and r["grad_norm"] > 1e-6
    summary["cz_healthy_at_underflow"] = cz_ok
    with open(os.path.join(out, "probe_report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    for k, v in summary.items():
        print(f"{k}: {v}")
    ok = rep.underflow_step is not None and cz_ok and not rep.double_underflow
    return (EXIT_OK if ok else EXIT_THRESHOLD), inputs, ["probe.csv", "probe_report.json"]


def cmd_eval_retrieval(args, cfg):
    inputs, held, vocab = _load_wps_and_vocab(args)
    inputs["checkpoint"] = _require(args.checkpoint, "checkpoint")
    params, enc = load_params(args.checkpoint)
    held = one_per_sentence(held)
    rows = []
    ok = True
    thresholds = {"sentence": cfg.get("min_sentence", args.min_sentence),
                  "word": cfg.get("min_word", args.min_word)}
    for level in ("sentence", "word"):
        rep = retrieval_eval(params, enc, vocab, held, level)
        rows.append(dataclasses.asdict(rep))
        print(f"{level}: A->B {rep.acc_ab:.3f}  B->A {rep.acc_ba:.3f}  (n={rep.n})")
        if thresholds[level] is not None and min(rep.acc_ab, rep.acc_ba) < thresholds[level]:
            ok = False
    out = _out(args)
    with open(os.path.join(out, "retrieval.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return (EXIT_OK if ok else EXIT_THRESHOLD), inputs, ["retrieval.json"]


def cmd_ablation(args, cfg):
    inputs, wps, vocab = _load_wps_and_vocab(args)
    inputs["heldout"] = _require(args.heldout, "heldout")
    held = one_per_sentence(load_wps_jsonl(args.heldout))
    config = train_config(args, cfg)
    rep = ablation_suite(wps, held, vocab, config)
    out = _out(args)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(rep.to_csv())
    print(rep.to_csv(), end="")
    for w in rep.warnings:
        print(f"warning: {w}")
    ordered = (rep.acc("ML-CTL-CZ", "word") >= rep.acc("CZ-snt", "word")
               and rep.acc("CZ-snt", "sentence") > rep.acc("baseline", "sentence")
               and rep.acc("info-snt", "sentence") > rep.acc("baseline", "sentence")
               and rep.acc("ML-CTL-CZ", "sentence") > rep.acc("baseline", "sentence"))
    return (EXIT_OK if ordered else EXIT_THRESHOLD), inputs, ["ablation.csv"]


def _read_items(path: str) -> list[ExportItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            f = line.split("\t")
            if len(f) not in (4, 6):
                raise CorpusFormatError(f"{path}:{lineno}: expected label, lang, group, text[, start, end]")
            span = (int(f[4]), int(f[5])) if len(f) == 6 else None
            items.append(ExportItem(f[0], f[1], f[2], f[3], span))
    return items


def cmd_export_embeddings(args, cfg):
    inputs = {"checkpoint": _require(args.checkpoint, "checkpoint"), "vocab": _require(args.vocab, "vocab"),
              "items": _require(args.items, "items")}
    params, enc = load_params(args.checkpoint)
    items = _read_items(args.items)
    out = _out(args)
    n = export_embeddings(params, enc, Vocab.load(args.vocab), items, os.path.join(out, "embeddings.tsv"))
    print(f"wrote {n} rows of {enc.d} dimensions")
    return EXIT_OK, inputs, ["embeddings.tsv"]


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file whose keys override defaults")
    common.add_argument("--out", default="run", help="output directory")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--wps", help="WPS pairs (JSONL)")
    training.add_argument("--vocab", help="vocabulary file")
    training.add_argument("--steps", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--loss", choices=LOSS_KINDS)
    training.add_argument("--mode", choices=MODES)
    training.add_argument("--precision", choices=("double", "single"))

    p = argparse.ArgumentParser(prog="mlctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="random word-for-word bitext and dictionary")
    s.add_argument("--vocab", type=int, default=50)
    s.add_argument("--sentences", type=int, default=200)
    s.add_argument("--heldout", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("build-wps", parents=[common], help="extract parallel word-positioned samples")
    s.add_argument("--corpus", default=None)
    s.add_argument("--dict", default=None)
    s.add_argument("--stopwords")
    s.add_argument("--vocab", help="existing vocabulary; built from the corpus when omitted")
    s.add_argument("--vocab-size", type=int, default=400)
    s.add_argument("--lang-a", default="A")
    s.add_argument("--lang-b", default="B")
    s.add_argument("--demo", action="store_true", help="use the shipped demo corpus, dictionary and stop words")
    s.set_defaults(func=cmd_build_wps)

    s = sub.add_parser("pretrain", parents=[common, training], help="contrastive pre-training")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("grad-check", parents=[common], help="CZ-NCE vs rho gradient identity")
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--dim", type=int, default=128)
    s.add_argument("--no-fd", action="store_true", help="skip the finite-difference comparison")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("loss-probe", parents=[common, training], help="float32 loss-floor probe")
    s.add_argument("--probe-steps", type=int, default=1500)
    s.set_defaults(func=cmd_loss_probe)

    s = sub.add_parser("eval-retrieval", parents=[common], help="top-1 retrieval on held-out WPS pairs")
    s.add_argument("--checkpoint")
    s.add_argument("--wps", help="held-out WPS pairs (JSONL)")
    s.add_argument("--vocab")
    s.add_argument("--min-sentence", type=float)
    s.add_argument("--min-word", type=float)
    s.set_defaults(func=cmd_eval_retrieval)

    s = sub.add_parser("ablation", parents=[common, training], help="baseline / info-snt / CZ-snt / ML-CTL-CZ")
    s.add_argument("--heldout", help="held-out WPS pairs (JSONL)")
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("export-embeddings", parents=[common], help="TSV of vectors for external projection")
    s.add_argument("--checkpoint")
    s.add_argument("--vocab")
    s.add_argument("--items", help="TSV: label, lang, group, text[, start, end]")
    s.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "demo", False):
        args.corpus = args.corpus or demo_path("demo_corpus.tsv")
        args.dict = args.dict or demo_path("demo_dict.tsv")
        args.stopwords = args.stopwords or demo_path("demo_stopwords.txt")
    try:
        cfg = read_config(args.config)
        code, inputs, outputs = args.func(args, cfg)
        if args.config:
            inputs = {**inputs, "config": args.config}
        RunManifest(args.subcommand, args.config, args.seed, inputs, outputs, inputs_hash(inputs),
                    datetime.now(timezone.utc).isoformat(timespec="seconds"), argv).write(args.out)
        return code
    except (FileNotFoundError, CorpusFormatError, UsageError, ValueError) as exc:
        print(f"mlctl {args.subcommand}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
