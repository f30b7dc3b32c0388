"""Softmax relation classifier, training loss, and all-relations bag scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

if TYPE_CHECKING:
    from .corpus import Bag
    from .model import FGSIModel

PROB_FLOOR = 1e-300


def logits(g: Tensor, W_o: Tensor, b_o: Tensor) -> Tensor:
    return ad.add(ad.matmul(g, ad.transpose(W_o)), b_o)


def predict_probs(g: Tensor, W_o: Tensor, b_o: Tensor) -> Tensor:
    """softmax(W_o g + b_o); ``g`` may be one vector or a batch of rows."""
    return ad.softmax(logits(g, W_o, b_o))


def nll_loss(probs: Tensor, gold) -> Tensor:
    """Sum over bags of -log p(gold); probabilities are floored at 1e-300."""
    gold = np.asarray(gold, dtype=np.intp)
    probs2 = probs if probs.data.ndim == 2 else ad.reshape(probs, (1, -1))
    flat = ad.reshape(probs2, (-1,))
    picked = ad.take_rows(flat, np.arange(len(gold)) * probs2.shape[1] + gold)
    return ad.scale(ad.sum_all(ad.log(picked, floor=PROB_FLOOR)), -1.0)


def nll_from_logits(z: Tensor, gold) -> Tensor:
    """Same loss as :func:`nll_loss` computed from logits via log-softmax."""
    gold = np.asarray(gold, dtype=np.intp)
    logp = ad.reshape(ad.log_softmax(z), (-1,))
    picked = ad.take_rows(logp, np.arange(len(gold)) * z.shape[1] + gold)
    return ad.scale(ad.sum_all(picked), -1.0)


@dataclass
class BagScore:
    head: str
    tail: str
    scores: dict[str, float]
    na: str = "NA"

    @property
    def predicted(self) -> str:
        """Best non-NA relation, unless NA outscores every other relation."""
        best = max((r for r in self.scores if r != self.na), key=lambda r: self.scores[r], default=self.na)
        if self.na in self.scores and self.scores[self.na] > self.scores.get(best, -1.0):
            return self.na
        return best


def score_bag_all_relations(bag: "Bag", model: "FGSIModel") -> BagScore:
    return score_bags([bag], model)[0]


def score_bags(bags: Sequence["Bag"], model: "FGSIModel") -> list[BagScore]:
    """Score every relation r by rebuilding each bag with r's queries and reading P(r | g_r)."""
    matrix = model.score_matrix(bags)
    names = model.relations.names
    return [BagScore(b.head, b.tail, {names[r]: float(matrix[i, r]) for r in range(len(names))},
                     model.relations.na)
            for i, b in enumerate(bags)]
