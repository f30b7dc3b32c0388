"""Command-line entry point: ``fgsi {train,eval,predict,gradcheck,synth,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .classifier import score_bags
from .corpus import (CorpusError, SynthConfig, build_bags, generate_synthetic, load_jsonl,
                     random_embeddings, save_embeddings, save_jsonl)
from .evaluation import pr_csv
from .model import ConfigError, FGSIConfig
from .trainer import CheckpointError, TrainingError, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2          # argparse's own code for bad flags
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_CORPUS = 5
EXIT_TRAINING = 6
EXIT_CHECKPOINT = 7
EXIT_GRADCHECK = 8


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(message)
        self.stage = stage
        self.code = code


def _stage(stage: str, fn, *args, **kw):
    """Run ``fn`` and translate known failures into a StageError naming ``stage``."""
    try:
        return fn(*args, **kw)
    except FileNotFoundError as err:
        raise StageError(stage, f"file not found: {err.filename}", EXIT_MISSING_FILE) from None
    except IsADirectoryError as err:
        raise StageError(stage, f"expected a file, got directory: {err.filename}", EXIT_MISSING_FILE) from None
    except ConfigError as err:
        raise StageError(stage, str(err), EXIT_CONFIG) from None
    except CorpusError as err:
        raise StageError(stage, str(err), EXIT_CORPUS) from None
    except CheckpointError as err:
        raise StageError(stage, str(err), EXIT_CHECKPOINT) from None
    except TrainingError as err:
        raise StageError(stage, str(err), EXIT_TRAINING) from None
    except OSError as err:
        raise StageError(stage, f"{err.strerror}: {err.filename}", EXIT_MISSING_FILE) from None


def _load_config(path, seed: int | None) -> FGSIConfig:
    config = FGSIConfig.load(path) if path else FGSIConfig()
    return config.replace(seed=seed) if seed is not None else config


def _write(path, text: str) -> None:
    _stage("write", Path(path).write_text, text, encoding="utf-8")


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    config = _stage("config", _load_config, args.config, args.seed)
    corpus = _stage("corpus", load_jsonl, args.corpus, config.max_sentence_len)
    if not corpus:
        raise StageError("corpus", f"{args.corpus}: no usable instances", EXIT_CORPUS)

    def report(rep, model):
        print(f"epoch {rep.epoch:3d}  loss {rep.mean_loss:.4f}  |g| {rep.grad_norm:.3f}  "
              f"gated {rep.gated_fraction:.3f}  lr {rep.lr_last:.2e}")

    run = _stage("train", pipeline.train, config, corpus, args.embeddings, on_epoch=report)
    _stage("checkpoint", save_checkpoint, args.out, run.model, run.state, run.batches_per_epoch)
    print(f"saved {args.out} after {run.state.t} steps ({run.seconds:.1f}s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _stage("checkpoint", load_checkpoint, args.model)
    corpus = _stage("corpus", load_jsonl, args.corpus, ckpt.model.config.max_sentence_len)
    if not corpus:
        raise StageError("corpus", f"{args.corpus}: no usable instances", EXIT_CORPUS)
    res = _stage("eval", pipeline.evaluate, ckpt.model, corpus)
    if args.report_pr:
        _write(args.report_pr, pr_csv(res.curve))
    if args.report_pn:
        _write(args.report_pn, res.pn_report(ckpt.model.config.to_dict(), ckpt.model.config.seed))
    summary = "  ".join(f"P@{n} {v:.3f}" for n, v in res.p_at.items())
    print(f"{summary}  AUC {res.auc:.4f}  gold facts {res.total_gold}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _stage("checkpoint", load_checkpoint, args.model)
    corpus = _stage("corpus", load_jsonl, args.corpus, ckpt.model.config.max_sentence_len)
    bags = build_bags(corpus, "eval")
    scores = _stage("predict", score_bags, bags, ckpt.model)
    lines = [json.dumps({"head": s.head, "tail": s.tail, "predicted": s.predicted, "scores": s.scores},
                        sort_keys=True) for s in scores]
    _write(args.out, "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = pipeline.gradient_check(args.seed, args.tol)
    for name, (ok, worst) in report.by_param().items():
        print(f"{'PASS' if ok else 'FAIL'}  {name:<12s} worst relative error {worst:.2e}")
    if report.passed:
        print(f"all {len(report.elements)} elements within {args.tol:g}")
        return EXIT_OK
    print(f"gradcheck: {len(report.failures())} elements exceed {args.tol:g}", file=sys.stderr)
    return EXIT_GRADCHECK


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, noise_rate=args.noise, num_relations=args.relations)
    train, test, truth = _stage("synth", generate_synthetic, cfg)
    _stage("write", save_jsonl, train, args.out_train)
    _stage("write", save_jsonl, test, args.out_test)
    if args.out_embeddings:
        vocab, matrix = random_embeddings(cfg.words(), args.embedding_dim, seed=args.seed)
        _stage("write", save_embeddings, vocab, matrix, args.out_embeddings)
    print(f"{len(train)} train / {len(test)} test sentences, {len(truth.noisy_bags)} noisy train bags")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _stage("config", _load_config, args.config, args.seed)
    if args.train or args.test:
        if not (args.train and args.test):
            raise StageError("corpus", "--train and --test must be given together", EXIT_USAGE)
        train = _stage("corpus", load_jsonl, args.train, config.max_sentence_len)
        test = _stage("corpus", load_jsonl, args.test, config.max_sentence_len)
        words = None
        source = f"{args.train} / {args.test}"
    else:
        synth = SynthConfig(seed=config.seed, noise_rate=args.noise)
        train, test, _ = _stage("synth", generate_synthetic, synth)
        words = synth.words()
        source = f"synthetic corpus, seed {config.seed}, noise {args.noise}"
    results = {}
    for label, cfg in (("full", config), ("control", pipeline.ablation_of(config))):
        run = _stage("train", pipeline.train, cfg, train, args.embeddings, words=words)
        res = _stage("eval", pipeline.evaluate, run.model, test)
        results[label] = {"auc": res.auc, "p_at": {str(n): v for n, v in res.p_at.items()}}
        print(f"{label:<8s} AUC {res.auc:.4f}  ({run.seconds:.1f}s)")
    print(f"data: {source}")
    if args.report:
        body = {"results": results, "config": config.to_dict(), "seed": config.seed}
        _write(args.report, json.dumps(body, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgsi", description="Bag-level relation extraction with gated "
                                "sentence attention and segment-weighted embeddings.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON config (defaults used when omitted)")
    t.add_argument("--corpus", required=True, help="training sentences, JSON Lines")
    t.add_argument("--embeddings", help="GloVe-format text file; random rows when omitted")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--report-pr", help="CSV precision/recall curve")
    e.add_argument("--report-pn", help="JSON P@N summary")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score every entity pair of a corpus")
    r.add_argument("--model", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--out", required=True, help="JSON Lines, one entity pair per line")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter on a tiny model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a seeded synthetic corpus")
    s.add_argument("--out-train", required=True)
    s.add_argument("--out-test", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--relations", type=int, default=8)
    s.add_argument("--out-embeddings", help="also write random GloVe-format vectors for the vocabulary")
    s.add_argument("--embedding-dim", type=int, default=16)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="full model vs plain-embedding, ungated control")
    a.add_argument("--config")
    a.add_argument("--train", help="training corpus; synthetic data when omitted")
    a.add_argument("--test")
    a.add_argument("--embeddings")
    a.add_argument("--seed", type=int)
    a.add_argument("--noise", type=float, default=0.3, help="noise rate of the synthetic corpus")
    a.add_argument("--report", help="JSON file with both results")
    a.set_defaults(func=cmd_ablate)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as err:
        print(f"fgsi {args.command}: {err.stage} failed: {err}", file=sys.stderr)
        return err.code


def main() -> None:
    sys.exit(run_cli())
