"""Threshold-gated attention over the sentences of a bag."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def sentence_relevance(p: Tensor, q: Tensor) -> Tensor:
    """Cosine relevance of each sentence feature row to its relation query row."""
    if q.data.ndim == 1 and p.data.ndim == 2:
        q = ad.take_rows(ad.reshape(q, (1, -1)), np.zeros(p.shape[0], dtype=np.intp))
    return ad.cosine(p, q)


@dataclass
class GatedWeights:
    survivors: np.ndarray     # sentence indices kept by the gate, ascending
    gamma: Tensor             # softmax weights over survivors, aligned with ``survivors``
    relevance: Tensor         # raw relevance of every sentence
    groups: np.ndarray        # bag id of each survivor
    fallback: np.ndarray      # per bag: True when no sentence cleared the gate


def gate_survivors(e: np.ndarray, beta: float, groups: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices with e >= beta; a bag with none keeps its first argmax sentence."""
    keep = e >= beta
    has = np.zeros(n_groups, dtype=bool)
    np.logical_or.at(has, groups, keep)
    fallback = ~has
    if fallback.any():
        order = np.lexsort((np.arange(len(e)), -e, groups))  # by group, e desc, index asc
        first_in_group = order[np.r_[True, groups[order][1:] != groups[order][:-1]]]
        for i in first_in_group:
            if fallback[groups[i]]:
                keep[i] = True
    return np.flatnonzero(keep), fallback


def gate_and_normalize(e: Tensor, beta: float, groups=None, n_groups: int | None = None) -> GatedWeights:
    """Drop sentences with relevance below ``beta`` and softmax the rest per bag.

    The gate itself is a hard selection: no gradient flows through it.
    """
    if groups is None:
        groups = np.zeros(e.shape[0], dtype=np.intp)
        n_groups = 1
    groups = np.asarray(groups, dtype=np.intp)
    if n_groups is None:
        n_groups = int(groups.max()) + 1
    survivors, fallback = gate_survivors(e.data, beta, groups, n_groups)
    surv_groups = groups[survivors]
    gamma = ad.segment_softmax(ad.take_rows(e, survivors), surv_groups, n_groups)
    return GatedWeights(survivors, gamma, e, surv_groups, fallback)


def bag_repr(P: Tensor, weights: GatedWeights, n_groups: int | None = None) -> Tensor:
    """Weighted sum of surviving sentence features per bag, shape (n_bags, dim)."""
    if n_groups is None:
        n_groups = len(weights.fallback)
    kept = ad.take_rows(P, weights.survivors)
    weighted = ad.mul(kept, ad.reshape(weights.gamma, (-1, 1)))
    return ad.segment_sum(weighted, weights.groups, n_groups)
