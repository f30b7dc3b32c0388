"""End-to-end workflows: build a model from a corpus, train, evaluate, and the
synthetic denoising experiment."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import (NA, Entity, RelationInventory, SentenceInstance, SynthConfig, build_bags,
                     corpus_tokens, generate_synthetic, load_embeddings, random_embeddings)
from .classifier import score_bags
from .evaluation import EvalResult, evaluate_records, gold_facts, records_from_scores
from .model import FGSIConfig, FGSIModel
from .trainer import AdamState, EpochReport, batches_per_epoch, fit

logger = logging.getLogger(__name__)

REPORT_NS = (50, 100, 200, 300)


def desk_config(**overrides) -> FGSIConfig:
    """Small model that trains on the synthetic corpus in seconds per epoch."""
    base = dict(k_w=16, k_p=3, widths=(3,), filters_per_width=32, l_clip=30,
                batch_size=64, epochs=30)
    base.update(overrides)
    return FGSIConfig(**base)


def ablation_of(config: FGSIConfig) -> FGSIConfig:
    """Control model: plain word+position input and an ungated bag attention."""
    return config.replace(use_intra_attention=False, beta=-1.0)


def build_model(config: FGSIConfig, train: Sequence[SentenceInstance], embeddings_path=None,
                words: Sequence[str] | None = None) -> FGSIModel:
    """Model whose relation inventory comes from the training corpus.

    With an embeddings file the vocabulary is the file's tokens and other
    words map to UNK.  Without one, ``words`` (default: every corpus token)
    get random rows.
    """
    if embeddings_path is not None:
        vocab, matrix = load_embeddings(embeddings_path, seed=config.seed)
        if matrix.shape[1] != config.k_w:
            config = config.replace(k_w=matrix.shape[1])
            logger.info("k_w set to %d from the embeddings file", config.k_w)
    else:
        words = corpus_tokens(train) if words is None else words
        vocab, matrix = random_embeddings(words, config.k_w, seed=config.seed)
    relations = RelationInventory.from_instances(train)
    return FGSIModel.initialize(config, vocab, matrix, relations)


@dataclass
class TrainRun:
    model: FGSIModel
    state: AdamState
    reports: list[EpochReport]
    batches_per_epoch: int
    seconds: float


def train(config: FGSIConfig, train_set: Sequence[SentenceInstance], embeddings_path=None,
          on_epoch=None, words: Sequence[str] | None = None) -> TrainRun:
    t0 = time.perf_counter()
    model = build_model(config, train_set, embeddings_path, words)
    bags = build_bags(train_set)
    state, reports = fit(model, bags, on_epoch=on_epoch)
    return TrainRun(model, state, reports, batches_per_epoch(len(bags), model.config.batch_size),
                    time.perf_counter() - t0)


def evaluate(model: FGSIModel, test_set: Sequence[SentenceInstance],
             ns: Sequence[int] = REPORT_NS) -> EvalResult:
    bags = build_bags(test_set, "eval")
    records = records_from_scores(score_bags(bags, model), bags, model.relations.na)
    return evaluate_records(records, len(gold_facts(bags, model.relations.na)), ns)


# ---------------------------------------------------------------- synthetic experiment


@dataclass
class SyntheticRun:
    seed: int
    noise: float
    auc: float
    p_at: dict[int, float]
    epochs: int
    seconds: float


def run_synthetic(config: FGSIConfig, synth: SynthConfig, ns: Sequence[int] = (50, 100)) -> SyntheticRun:
    train_set, test_set, _ = generate_synthetic(synth)
    run = train(config, train_set, words=synth.words())
    res = evaluate(run.model, test_set, ns)
    return SyntheticRun(synth.seed, synth.noise_rate, res.auc, res.p_at, len(run.reports), run.seconds)


@dataclass
class AblationResult:
    full: SyntheticRun
    control: SyntheticRun

    @property
    def full_wins(self) -> bool:
        return self.full.auc > self.control.auc


def run_ablation(config: FGSIConfig, synth: SynthConfig) -> AblationResult:
    return AblationResult(run_synthetic(config, synth), run_synthetic(ablation_of(config), synth))


# ---------------------------------------------------------------- gradient check


def tiny_config(seed: int = 0, beta: float = -1.0) -> FGSIConfig:
    return FGSIConfig(k_w=8, k_p=2, widths=(3,), filters_per_width=4, l_clip=12,
                      max_sentence_len=12, beta=beta, dropout_keep=1.0, decoy_queries=0,
                      epochs=1, batch_size=1, seed=seed)


def tiny_bag(seed: int = 0, n_sentences: int = 3) -> list[SentenceInstance]:
    """One bag of short sentences over a 48-word vocabulary."""
    rng = np.random.default_rng([seed, 11])
    out = []
    for _ in range(n_sentences):
        m = int(rng.integers(6, 13))
        tokens = [f"v{int(i):02d}" for i in rng.integers(0, 48, size=m)]
        a, b = sorted(rng.choice(m, size=2, replace=False))
        tokens[a], tokens[b] = "h_ent", "t_ent"
        out.append(SentenceInstance(tuple(tokens), Entity("h", int(a), int(a)),
                                    Entity("t", int(b), int(b)), "r1"))
    return out


def tiny_model(seed: int = 0, beta: float = -1.0) -> tuple[FGSIModel, list[SentenceInstance]]:
    """Vocabulary of 50 (48 words + PAD + UNK), 3 relations + NA."""
    config = tiny_config(seed, beta)
    vocab, matrix = random_embeddings([f"v{i:02d}" for i in range(48)], config.k_w, seed=seed)
    relations = RelationInventory([NA, "r1", "r2", "r3"])
    model = FGSIModel.initialize(config, vocab, matrix, relations)
    rng = np.random.default_rng([seed, 12])
    # Break the zero initialisation so bias gradients are exercised at generic points.
    for name, t in model.store.items():
        if name.startswith("b_"):
            t.data[...] = rng.uniform(-0.1, 0.1, size=t.shape)
    return model, tiny_bag(seed)


def gradient_check(seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> ad.GradCheckReport:
    model, sentences = tiny_model(seed)
    prepared = model.prepare(build_bags(sentences))

    def closure():
        loss, _ = model.loss(prepared, mean=True)
        return loss

    return ad.grad_check(closure, model.store, h=h, tol=tol)
