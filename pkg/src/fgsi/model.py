"""PCNN+FGSI model: configuration, parameters, and the batched forward pass."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .bag_attention import bag_repr, gate_and_normalize, sentence_relevance
from .classifier import logits as classifier_logits, nll_from_logits
from .corpus import Bag, RelationInventory, Vocabulary, index_tokens
from .embedding import embed_tokens, init_relation_queries, layout_positions
from .encoder import FilterBank, dropout_mask, encode


class ConfigError(ValueError):
    pass


@dataclass
class FGSIConfig:
    """Every tunable of a run.  Defaults follow the published settings where given."""

    k_w: int = 200
    k_p: int = 5
    widths: tuple[int, ...] = (3, 4, 5)
    filters_per_width: int = 200
    beta: float = 0.0
    dropout_keep: float = 0.5
    use_intra_attention: bool = True
    l_clip: int = 256
    max_sentence_len: int = 256
    lr0: float = 1e-2
    lr_min: float = 1e-6
    decay_power: float = 1.0
    batch_size: int = 128
    epochs: int = 20
    total_steps: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decoy_queries: int = 1
    seed: int = 0
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.frozen = tuple(self.frozen)
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.k_w <= 0 or self.k_p <= 0 or self.filters_per_width <= 0:
            raise ConfigError("k_w, k_p and filters_per_width must be positive")
        if not -1.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [-1, 1], got {self.beta}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.decoy_queries < 0:
            raise ConfigError("decoy_queries must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def k(self) -> int:
        return self.k_w + 2 * self.k_p

    @property
    def feature_dim(self) -> int:
        return 3 * self.filters_per_width * len(self.widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "FGSIConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def load(cls, path) -> "FGSIConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: malformed JSON ({err.msg})") from None
        return cls.from_dict(raw)

    def replace(self, **kw) -> "FGSIConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PreparedBag:
    """Integer layout of one bag, computed once per corpus."""

    token_ids: np.ndarray
    piece_seg: np.ndarray      # 3 * local sentence + piece
    head_pos: np.ndarray
    tail_pos: np.ndarray
    lengths: np.ndarray
    gold: int                  # relation index used for training, -1 if unknown

    @property
    def n_sentences(self) -> int:
        return len(self.lengths)


@dataclass
class BatchLayout:
    token_ids: np.ndarray
    piece_seg: np.ndarray
    head_pos: np.ndarray
    tail_pos: np.ndarray
    lengths: np.ndarray
    sent_bag: np.ndarray
    n_bags: int
    gold: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def n_sentences(self) -> int:
        return len(self.lengths)

    @classmethod
    def stack(cls, bags: Sequence[PreparedBag]) -> "BatchLayout":
        offsets = np.cumsum([0] + [b.n_sentences for b in bags])[:-1]
        return cls(
            token_ids=np.concatenate([b.token_ids for b in bags]),
            piece_seg=np.concatenate([b.piece_seg + 3 * o for b, o in zip(bags, offsets)]),
            head_pos=np.concatenate([b.head_pos for b in bags]),
            tail_pos=np.concatenate([b.tail_pos for b in bags]),
            lengths=np.concatenate([b.lengths for b in bags]),
            sent_bag=np.repeat(np.arange(len(bags)), [b.n_sentences for b in bags]),
            n_bags=len(bags),
            gold=np.array([b.gold for b in bags], dtype=np.intp),
        )


@dataclass
class ForwardResult:
    logits: Tensor
    alpha: Tensor | None
    features: Tensor
    relevance: Tensor
    survivors: np.ndarray
    fallback: np.ndarray


class FGSIModel:
    def __init__(self, config: FGSIConfig, vocab: Vocabulary, relations: RelationInventory, store: ParamStore):
        self.config = config
        self.vocab = vocab
        self.relations = relations
        self.store = store

    @classmethod
    def initialize(cls, config: FGSIConfig, vocab: Vocabulary, embeddings: np.ndarray,
                   relations: RelationInventory) -> "FGSIModel":
        if embeddings.shape != (len(vocab), config.k_w):
            raise ConfigError(f"embedding matrix shape {embeddings.shape} does not match "
                              f"vocabulary size {len(vocab)} x k_w={config.k_w}")
        rng = np.random.default_rng([config.seed, 1])
        h, fdim, k = len(relations), config.feature_dim, config.k
        store = ParamStore()
        store.add("E", embeddings.copy())
        rows = 2 * config.l_clip + 1
        store.add("D_he1", rng.uniform(-0.1, 0.1, size=(rows, config.k_p)))
        store.add("D_te2", rng.uniform(-0.1, 0.1, size=(rows, config.k_p)))
        for w in config.widths:
            bound = np.sqrt(6.0 / (w * k + config.filters_per_width))
            store.add(f"W_conv{w}", rng.uniform(-bound, bound, size=(config.filters_per_width, w, k)))
            store.add(f"b_conv{w}", np.zeros(config.filters_per_width))
        bound = np.sqrt(6.0 / (fdim + h))
        store.add("W_o", rng.uniform(-bound, bound, size=(h, fdim)))
        store.add("b_o", np.zeros(h))
        r_query, q_rel = init_relation_queries(relations, vocab, embeddings, fdim, config.seed)
        store.add("r_query", r_query)
        store.add("Q_relation", q_rel)
        return cls(config, vocab, relations, store)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h = self.config, len(self.relations)
        shapes = {"E": (len(self.vocab), c.k_w), "D_he1": (2 * c.l_clip + 1, c.k_p),
                  "D_te2": (2 * c.l_clip + 1, c.k_p)}
        for w in c.widths:
            shapes[f"W_conv{w}"] = (c.filters_per_width, w, c.k)
            shapes[f"b_conv{w}"] = (c.filters_per_width,)
        shapes.update({"W_o": (h, c.feature_dim), "b_o": (h,), "r_query": (h, c.k_w),
                       "Q_relation": (h, c.feature_dim)})
        return shapes

    # ------------------------------------------------------------ data layout

    def prepare(self, bags: Sequence[Bag]) -> list[PreparedBag]:
        out = []
        for bag in bags:
            insts = bag.instances
            piece_seg, hp, tp = layout_positions(insts, self.config.l_clip)
            ids = np.concatenate([index_tokens(i, self.vocab) for i in insts])
            gold = self.relations.index.get(bag.relation, -1) if bag.relation is not None else -1
            out.append(PreparedBag(ids, piece_seg, hp, tp,
                                   np.array([len(i.tokens) for i in insts], dtype=np.intp), gold))
        return out

    # ------------------------------------------------------------ forward

    def forward(self, layout: BatchLayout, query_rel, mask: np.ndarray | None = None) -> ForwardResult:
        """Logits (n_bags, h) with each bag attending through relation ``query_rel[b]``."""
        c, store = self.config, self.store
        query_rel = np.asarray(query_rel, dtype=np.intp)
        sent_rel = query_rel[layout.sent_bag]
        emb = embed_tokens(store, layout.token_ids, layout.piece_seg, layout.head_pos, layout.tail_pos,
                           layout.n_sentences, sent_rel, c.use_intra_attention)
        p = encode(emb.X, FilterBank.from_store(store, c.widths), layout.piece_seg, layout.lengths, mask)
        e = sentence_relevance(p, ad.take_rows(store["Q_relation"], sent_rel))
        gate = gate_and_normalize(e, c.beta, layout.sent_bag, layout.n_bags)
        g = bag_repr(p, gate, layout.n_bags)
        z = classifier_logits(g, store["W_o"], store["b_o"])
        return ForwardResult(z, emb.alpha, p, e, gate.survivors, gate.fallback)

    def training_mask(self, bag_indices: Sequence[int], prepared: Sequence[PreparedBag], epoch: int):
        c = self.config
        if c.dropout_keep >= 1.0:
            return None
        return np.concatenate([
            dropout_mask(c.seed, epoch, int(i), b.n_sentences, c.feature_dim, c.dropout_keep)
            for i, b in zip(bag_indices, prepared)
        ])

    def loss(self, prepared: Sequence[PreparedBag], mask: np.ndarray | None = None,
             mean: bool = True, decoys: np.ndarray | None = None) -> tuple[Tensor, ForwardResult]:
        """NLL of the gold relations, attending with each bag's gold-relation queries.

        Each row of ``decoys`` (shape (k, n_bags)) adds one more pass in which
        bag b attends with relation ``decoys[i, b]`` while the target stays
        the gold relation.  Without those passes the classifier can read the
        label off the query-dependent scaling, which breaks all-relations
        scoring at inference.  The mean is taken over all passes.
        """
        layout = BatchLayout.stack(prepared)
        if (layout.gold < 0).any():
            raise ValueError("loss requires bags with a known relation")
        res = self.forward(layout, layout.gold, mask)
        total = nll_from_logits(res.logits, layout.gold)
        passes = 1
        for row in (decoys if decoys is not None else ()):
            other = self.forward(layout, row, mask)
            total = ad.add(total, nll_from_logits(other.logits, layout.gold))
            passes += 1
        return (ad.scale(total, 1.0 / (layout.n_bags * passes)) if mean else total), res

    def draw_decoys(self, gold: np.ndarray, epoch: int, step: int) -> np.ndarray | None:
        """Random non-gold relations, shape (decoy_queries, n_bags)."""
        k, h = self.config.decoy_queries, len(self.relations)
        if k == 0 or h < 2:
            return None
        rng = np.random.default_rng([self.config.seed, 3, epoch, step])
        return (np.asarray(gold)[None, :] + rng.integers(1, h, size=(k, len(gold)))) % h

    def score_matrix(self, bags: Sequence[Bag], chunk: int = 512) -> np.ndarray:
        """(n_bags, h) matrix: entry [b, r] = P(r | g_r) with bag b rebuilt for relation r."""
        prepared = self.prepare(bags)
        h = len(self.relations)
        out = np.zeros((len(prepared), h))
        with ad.no_grad():
            for start in range(0, len(prepared), chunk):
                layout = BatchLayout.stack(prepared[start:start + chunk])
                for r in range(h):
                    res = self.forward(layout, np.full(layout.n_bags, r))
                    z = res.logits.data
                    z = z - z.max(axis=1, keepdims=True)
                    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                    out[start:start + layout.n_bags, r] = probs[:, r]
        return out
