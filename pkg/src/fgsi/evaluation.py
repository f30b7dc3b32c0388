"""Held-out evaluation: precision/recall curves, P@N and PR-AUC."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .classifier import BagScore
from .corpus import Bag

logger = logging.getLogger(__name__)

PR_HEADER = ["score", "correct", "precision", "recall"]


@dataclass(frozen=True)
class PredictionRecord:
    head: str
    tail: str
    relation: str
    score: float
    correct: bool


@dataclass(frozen=True)
class PRPoint:
    precision: float
    recall: float
    threshold: float
    correct: bool


def rank(records: Iterable[PredictionRecord]) -> list[PredictionRecord]:
    """Descending score; ties broken by (head, tail, relation)."""
    return sorted(records, key=lambda r: (-r.score, r.head, r.tail, r.relation))


def pr_curve(records: Iterable[PredictionRecord], total_gold: int) -> list[PRPoint]:
    if total_gold < 1:
        raise ValueError("total_gold must be at least 1")
    points = []
    hits = 0
    for j, rec in enumerate(rank(records), start=1):
        hits += rec.correct
        points.append(PRPoint(hits / j, hits / total_gold, rec.score, rec.correct))
    return points


def p_at_n(records: Sequence[PredictionRecord], n: int) -> float:
    """Precision among the ``n`` best-scored records (all of them if fewer exist)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    top = rank(records)[:n]
    if len(top) < n:
        logger.warning("P@%d computed over only %d records", n, len(top))
    if not top:
        return 0.0
    return sum(r.correct for r in top) / len(top)


def pr_auc(curve: Sequence[PRPoint]) -> float:
    """Sum of precision times recall increment, taking precision at each step's right end."""
    if not curve:
        raise ValueError("empty curve")
    area, prev = 0.0, 0.0
    for pt in curve:
        area += (pt.recall - prev) * pt.precision
        prev = pt.recall
    return area


def gold_facts(bags: Iterable[Bag], na: str = "NA") -> set[tuple[str, str, str]]:
    return {(b.head, b.tail, r) for b in bags for r in b.gold if r != na}


def records_from_scores(scores: Sequence[BagScore], bags: Sequence[Bag], na: str = "NA") -> list[PredictionRecord]:
    """One record per (entity pair, non-NA relation)."""
    out = []
    for s, b in zip(scores, bags):
        for rel, value in s.scores.items():
            if rel == na:
                continue
            out.append(PredictionRecord(b.head, b.tail, rel, value, rel in b.gold))
    return out


def pr_csv(curve: Sequence[PRPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PR_HEADER)
    for pt in curve:
        w.writerow([repr(pt.threshold), int(pt.correct), repr(pt.precision), repr(pt.recall)])
    return buf.getvalue()


@dataclass
class EvalResult:
    records: list[PredictionRecord]
    curve: list[PRPoint]
    total_gold: int
    auc: float
    p_at: dict[int, float]

    def pn_report(self, config: dict | None = None, seed: int | None = None) -> str:
        body = {
            "p_at": {str(n): v for n, v in self.p_at.items()},
            "p_at_truncated": {str(n): len(self.records) < n for n in self.p_at},
            "auc": self.auc,
            "total_gold": self.total_gold,
            "config": config or {},
            "seed": seed,
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"


def evaluate_records(records: list[PredictionRecord], total_gold: int,
                     ns: Sequence[int] = (100, 200, 300)) -> EvalResult:
    curve = pr_curve(records, max(total_gold, 1))
    auc = pr_auc(curve) if curve else 0.0
    return EvalResult(records, curve, total_gold, auc, {n: p_at_n(records, n) for n in ns})
