"""Fine-grained text embedding layer.

A sentence is split into three pieces at the entity boundaries, each piece is
weighted by the softmax of its cosine relevance to a relation query, and
position features are appended to the weighted word vectors.

Functions here work on a *flattened* batch: the tokens of several sentences
are stacked row-wise, and ``piece_seg`` gives each token the id
``3 * sentence + piece``.  A single sentence is just a batch of one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import RelationInventory, SentenceInstance, Vocabulary

L_CLIP = 256


@dataclass(frozen=True)
class SegmentSpans:
    """Three consecutive half-open token ranges covering ``range(m)``."""

    piece1: range
    piece2: range
    piece3: range

    @property
    def pieces(self) -> tuple[range, range, range]:
        return (self.piece1, self.piece2, self.piece3)

    @property
    def length(self) -> int:
        return self.piece3.stop

    def piece_ids(self) -> np.ndarray:
        ids = np.empty(self.length, dtype=np.intp)
        for j, r in enumerate(self.pieces):
            ids[r.start:r.stop] = j
        return ids


def segment_by_boundaries(m: int, first_end: int, second_end: int) -> SegmentSpans:
    """Pieces [0, first_end], [first_end+1, second_end], [second_end+1, m-1]."""
    return SegmentSpans(range(0, first_end + 1), range(first_end + 1, second_end + 1),
                        range(second_end + 1, m))


def segment_sentence(instance: SentenceInstance) -> SegmentSpans:
    first, second = instance.ordered_spans()
    return segment_by_boundaries(len(instance.tokens), first[1], second[1])


def position_indices(m: int, instance: SentenceInstance, l_clip: int = L_CLIP) -> tuple[np.ndarray, np.ndarray]:
    """Row indices into the two position tables for every token.

    Distance is measured to the start of each entity span (first entity in
    token order for the head table), clipped to [-l_clip, l_clip], and
    shifted by l_clip so that distance -l_clip is row 0.
    """
    first, second = instance.ordered_spans()
    i = np.arange(m)
    d_head = np.clip(i - first[0], -l_clip, l_clip) + l_clip
    d_tail = np.clip(i - second[0], -l_clip, l_clip) + l_clip
    return d_head.astype(np.intp), d_tail.astype(np.intp)


def position_features(i: int, instance: SentenceInstance, head_table: Tensor, tail_table: Tensor,
                      l_clip: int = L_CLIP) -> tuple[Tensor, Tensor]:
    """Position embedding rows (d_head, d_tail) of token ``i``."""
    d_head, d_tail = position_indices(len(instance.tokens), instance, l_clip)
    return ad.take_rows(head_table, d_head[i]), ad.take_rows(tail_table, d_tail[i])


# ---------------------------------------------------------------- attention over pieces


def segment_vectors(words: Tensor, piece_seg, n_sentences: int) -> Tensor:
    """Mean word vector of each piece, shape (3 * n_sentences, k_w); empty pieces are zero."""
    return ad.segment_mean(words, piece_seg, 3 * n_sentences)


def segment_vector(words: Tensor, span: range) -> Tensor:
    return ad.reshape(ad.range_mean(words, span.start, span.stop), (words.shape[1],))


def intra_attention(seg_vecs: Tensor, queries: Tensor) -> Tensor:
    """Piece weights, shape (n_sentences, 3).

    ``seg_vecs`` holds three piece vectors per sentence; ``queries`` holds the
    matching relation query per row, or a single query vector for all rows.
    """
    if queries.data.ndim == 1:
        queries = ad.take_rows(ad.reshape(queries, (1, -1)), np.zeros(seg_vecs.shape[0], dtype=np.intp))
    relevance = ad.cosine(seg_vecs, queries)
    return ad.softmax(ad.reshape(relevance, (-1, 3)))


def apply_segment_weights(words: Tensor, piece_seg, alpha: Tensor) -> Tensor:
    """Scale every token row by the weight of the piece it belongs to."""
    per_token = ad.take_rows(ad.reshape(alpha, (-1,)), piece_seg)
    return ad.mul(words, ad.reshape(per_token, (-1, 1)))


@dataclass
class EmbeddedSentence:
    X: Tensor                 # (m, k_w + 2 k_p)
    alpha: Tensor | None      # (n_sentences, 3); None without intra-sentence attention


def embed_tokens(store, token_ids, piece_seg, head_pos, tail_pos, n_sentences: int,
                 query_rows=None, use_attention: bool = True) -> EmbeddedSentence:
    """Build model input rows for a flattened batch of sentences.

    ``query_rows`` gives, per sentence, the row of the relation-query table to
    attend with.
    """
    words = ad.take_rows(store["E"], token_ids)
    alpha = None
    if use_attention:
        seg = segment_vectors(words, piece_seg, n_sentences)
        q = ad.take_rows(store["r_query"], np.repeat(np.asarray(query_rows, dtype=np.intp), 3))
        alpha = intra_attention(seg, q)
        words = apply_segment_weights(words, piece_seg, alpha)
    ph = ad.take_rows(store["D_he1"], head_pos)
    pt = ad.take_rows(store["D_te2"], tail_pos)
    return EmbeddedSentence(ad.concat([words, ph, pt], axis=1), alpha)


def assemble_input(instance: SentenceInstance, vocab: Vocabulary, relation: int, store,
                   l_clip: int = L_CLIP, use_attention: bool = True) -> EmbeddedSentence:
    """Input matrix X for one sentence, attending with relation ``relation``'s query."""
    ids = np.array([vocab.index(t) for t in instance.tokens], dtype=np.intp)
    spans = segment_sentence(instance)
    hp, tp = position_indices(len(ids), instance, l_clip)
    return embed_tokens(store, ids, spans.piece_ids(), hp, tp, 1, [relation], use_attention)


# ---------------------------------------------------------------- relation queries

_NAME_SPLIT = re.compile(r"[/_.]+")


def relation_name_tokens(name: str) -> list[str]:
    return [t for t in _NAME_SPLIT.split(name) if t and t.isalnum()]


def init_relation_queries(relations: RelationInventory, vocab: Vocabulary, embeddings: np.ndarray,
                          feature_dim: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Initial word-space queries (h, k_w) and feature-space queries (h, feature_dim).

    A word-space query is the mean embedding of the in-vocabulary tokens of
    the relation name, or a uniform [-0.25, 0.25] draw when none are known.
    """
    rng = np.random.default_rng([seed, 17])
    k_w = embeddings.shape[1]
    r_query = np.zeros((len(relations), k_w))
    for i, name in enumerate(relations.names):
        known = [vocab.stoi[t] for t in relation_name_tokens(name) if t in vocab.stoi]
        fallback = rng.uniform(-0.25, 0.25, size=k_w)
        r_query[i] = embeddings[known].mean(axis=0) if known else fallback
    q_relation = np.random.default_rng([seed, 18]).uniform(-0.1, 0.1, size=(len(relations), feature_dim))
    return r_query, q_relation


def layout_positions(instances: Sequence[SentenceInstance], l_clip: int):
    """Concatenated piece ids and position indices for a list of sentences."""
    piece_seg, heads, tails = [], [], []
    for s, inst in enumerate(instances):
        m = len(inst.tokens)
        piece_seg.append(segment_sentence(inst).piece_ids() + 3 * s)
        hp, tp = position_indices(m, inst, l_clip)
        heads.append(hp)
        tails.append(tp)
    return np.concatenate(piece_seg), np.concatenate(heads), np.concatenate(tails)
