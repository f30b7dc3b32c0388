"""Piecewise convolutional sentence encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FilterBank:
    """Convolution filters grouped by window width (ascending)."""

    weights: dict[int, Tensor]   # width -> (count, width, k)
    biases: dict[int, Tensor]    # width -> (count,)

    @classmethod
    def from_store(cls, store, widths: Sequence[int]) -> "FilterBank":
        return cls({w: store[f"W_conv{w}"] for w in widths}, {w: store[f"b_conv{w}"] for w in widths})

    @property
    def widths(self) -> list[int]:
        return sorted(self.weights)

    @property
    def total_filters(self) -> int:
        return sum(self.weights[w].shape[0] for w in self.widths)


def conv_index(lengths: Sequence[int], width: int) -> np.ndarray:
    """Row indices of every convolution window over stacked sentences.

    Shape (T, width).  Windows are centred so each sentence keeps its length:
    floor((w-1)/2) rows of left padding and ceil((w-1)/2) of right padding.
    Positions outside a sentence point at row T, the appended zero row.
    """
    lengths = np.asarray(lengths, dtype=np.intp)
    total = int(lengths.sum())
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    ends = np.repeat(np.cumsum(lengths), lengths)
    pos = np.arange(total)
    offsets = np.arange(width) - (width - 1) // 2
    idx = pos[:, None] + offsets[None, :]
    inside = (idx >= starts[:, None]) & (idx < ends[:, None])
    return np.where(inside, idx, total)


def convolve(X: Tensor, bank: FilterBank, lengths: Sequence[int] | None = None) -> Tensor:
    """Same-length convolution; returns maps of shape (T, n_total).

    Column i is filter i's response at every token position, widths in
    ascending order and filters in bank order within a width.
    """
    total, k = X.shape
    if lengths is None:
        lengths = [total]
    padded = ad.concat([X, Tensor(np.zeros((1, k)))], axis=0)
    maps = []
    for w in bank.widths:
        W = bank.weights[w]
        count = W.shape[0]
        if W.shape[1:] != (w, k):
            raise ad.ShapeError("convolve", X.shape, W.shape)
        cols = ad.reshape(ad.take_rows(padded, conv_index(lengths, w)), (total, w * k))
        flat = ad.reshape(W, (count, w * k))
        maps.append(ad.add(ad.matmul(cols, ad.transpose(flat)), bank.biases[w]))
    return maps[0] if len(maps) == 1 else ad.concat(maps, axis=1)


def piecewise_max_pool(maps: Tensor, piece_seg, n_sentences: int) -> Tensor:
    """Per sentence, max of each filter map over each of the three pieces.

    Output (n_sentences, 3 * n_total) ordered filter-major, piece-minor:
    entry [s, 3*i + j] is filter i over piece j.  Empty pieces give 0.
    """
    n = maps.shape[1]
    pooled = ad.segment_max(maps, piece_seg, 3 * n_sentences)
    per_piece = ad.reshape(pooled, (n_sentences, 3, n))
    return ad.reshape(ad.transpose(per_piece, (0, 2, 1)), (n_sentences, 3 * n))


def dropout_mask(seed: int, epoch: int, bag_index: int, n_sentences: int, dim: int, keep: float) -> np.ndarray:
    """Inverted-dropout multipliers for one bag; row s belongs to sentence s."""
    rng = np.random.default_rng([seed, epoch, bag_index])
    return (rng.random((n_sentences, dim)) < keep) / keep


def encode(X: Tensor, bank: FilterBank, piece_seg, lengths: Sequence[int],
           mask: np.ndarray | None = None) -> Tensor:
    """Sentence features tanh(piecewise pool(conv(X))), optionally times a dropout mask."""
    p = ad.tanh(piecewise_max_pool(convolve(X, bank, lengths), piece_seg, len(lengths)))
    if mask is not None:
        p = ad.mul(p, Tensor(mask))
    return p


def encode_sentence(X: Tensor, bank: FilterBank, piece_seg, keep: float = 0.5, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Feature vector (3 * n_total,) of a single embedded sentence."""
    mask = None
    if training and keep < 1.0:
        rng = rng if rng is not None else np.random.default_rng()
        mask = (rng.random((1, 3 * bank.total_filters)) < keep) / keep
    p = encode(X, bank, piece_seg, [X.shape[0]], mask)
    return ad.reshape(p, (p.shape[1],))
