"""Filtered ranking metrics, Stage-1 vs Stage-2 confusion counts and rank histograms."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .kb import Direction

MISS = math.inf
DEFAULT_HITS = (1, 10, 50)


class TiePolicy(str, enum.Enum):
    OPTIMISTIC = "optimistic"  # ties never worsen the gold rank
    MEAN = "mean"  # each tie costs half a position


def filtered_rank(scores, gold: int, filter_set: Iterable[int] = (),
                  tie_policy: TiePolicy = TiePolicy.OPTIMISTIC) -> float:
    """1 + number of unfiltered entities scoring above ``gold``.

    ``scores`` is indexed by entity id. Entities in ``filter_set`` other than
    the gold are ignored. A gold scored ``-inf`` (or NaN) was never retrieved
    and yields :data:`MISS`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    g = scores[gold]
    if np.isnan(g) or g == -np.inf:
        return MISS
    keep = np.ones(len(scores), dtype=bool)
    others = [e for e in filter_set if e != gold]
    if others:
        keep[others] = False
    keep[gold] = False
    higher = int(np.count_nonzero(scores[keep] > g))
    if TiePolicy(tie_policy) is TiePolicy.OPTIMISTIC:
        return 1 + higher
    ties = int(np.count_nonzero(scores[keep] == g))
    return 1 + higher + 0.5 * ties


def two_tier_rank(candidate_ids: Sequence[int], candidate_scores: Sequence[float], fallback_scores,
                  gold: int, filter_set: Iterable[int] = (),
                  tie_policy: TiePolicy = TiePolicy.OPTIMISTIC, outside: str = "stage1") -> float:
    """Rank of ``gold`` when the reranked candidates precede every other entity.

    Inside the candidate block ``candidate_scores`` decide; below it the
    remaining entities keep their ``fallback_scores`` (Stage-1) order. With
    ``outside="miss"`` a gold outside the candidates is a miss instead.
    """
    filt = set(filter_set) - {gold}
    cand_pos = {e: j for j, e in enumerate(candidate_ids)}
    kept = [j for j, e in enumerate(candidate_ids) if e not in filt]
    if gold in cand_pos:
        g = candidate_scores[cand_pos[gold]]
        others = [candidate_scores[j] for j in kept if candidate_ids[j] != gold]
        higher = sum(1 for s in others if s > g)
        if TiePolicy(tie_policy) is TiePolicy.OPTIMISTIC:
            return 1 + higher
        return 1 + higher + 0.5 * sum(1 for s in others if s == g)
    if outside == "miss":
        return MISS
    rest = np.asarray(fallback_scores, dtype=np.float64).copy()
    rest[list(cand_pos)] = -np.inf
    below = filtered_rank(rest, gold, filt, tie_policy)
    return len(kept) + below


@dataclass
class EvalReport:
    mrr: float
    hits: Dict[int, float]
    n_queries: int
    head: Optional["EvalReport"] = None
    tail: Optional["EvalReport"] = None

    def to_dict(self) -> dict:
        out = {"mrr": self.mrr, "hits": {str(n): v for n, v in self.hits.items()}, "n_queries": self.n_queries}
        if self.head is not None:
            out["head"] = self.head.to_dict()
        if self.tail is not None:
            out["tail"] = self.tail.to_dict()
        return out


def _summarize(ranks: Sequence[float], hits_at: Sequence[int]) -> EvalReport:
    r = np.asarray(ranks, dtype=np.float64)
    mrr = math.fsum(1.0 / r) / len(r)
    hits = {n: float(100.0 * np.count_nonzero(r <= n) / len(r)) for n in hits_at}
    return EvalReport(mrr, hits, len(r))


def compute_metrics(ranks: Sequence[float], directions: Optional[Sequence[Direction]] = None,
                    hits_at: Sequence[int] = DEFAULT_HITS) -> EvalReport:
    """MRR and HITS@N (percent); misses count as rank infinity.

    With ``directions`` the head and tail reports are computed separately and
    the overall figures are their average.
    """
    if len(ranks) == 0:
        raise ValueError("no ranks to evaluate")
    hits_at = sorted(hits_at)
    if directions is None:
        return _summarize(ranks, hits_at)
    if len(directions) != len(ranks):
        raise ValueError("ranks and directions differ in length")
    parts = {}
    for d in (Direction.HEAD, Direction.TAIL):
        sub = [r for r, dd in zip(ranks, directions) if Direction(dd) is d]
        parts[d] = _summarize(sub, hits_at) if sub else None
    present = [p for p in parts.values() if p is not None]
    mrr = sum(p.mrr for p in present) / len(present)
    hits = {n: sum(p.hits[n] for p in present) / len(present) for n in hits_at}
    return EvalReport(mrr, hits, len(ranks), head=parts[Direction.HEAD], tail=parts[Direction.TAIL])


@dataclass
class ConfusionCounts:
    c00: int = 0
    c01: int = 0
    c10: int = 0
    c11: int = 0

    @property
    def total(self) -> int:
        return self.c00 + self.c01 + self.c10 + self.c11

    def to_dict(self) -> dict:
        return {"00": self.c00, "01": self.c01, "10": self.c10, "11": self.c11}


def confusion_matrix(stage1_top1: Sequence[int], stage2_top1: Sequence[int], golds: Sequence[int]) -> ConfusionCounts:
    """Case ab: a = Stage-1 top-1 correct, b = Stage-2 top-1 correct."""
    if not len(stage1_top1) == len(stage2_top1) == len(golds):
        raise ValueError("prediction and gold lists differ in length")
    counts = Counter((int(a == g), int(b == g)) for a, b, g in zip(stage1_top1, stage2_top1, golds))
    return ConfusionCounts(counts[(0, 0)], counts[(0, 1)], counts[(1, 0)], counts[(1, 1)])


def degradation_rate(counts: ConfusionCounts) -> float:
    """Percentage of queries that Stage-2 turned from correct to incorrect."""
    if counts.total == 0:
        raise ValueError("no queries counted")
    return 100.0 * counts.c10 / counts.total


def rank_histogram(stage1_ranks: Sequence[int], k: int) -> List[int]:
    """Counts of queries per Stage-1 rank 1..k (index 0 is rank 1)."""
    bins = [0] * k
    for r in stage1_ranks:
        if not 1 <= r <= k:
            raise ValueError(f"Stage-1 rank {r} outside 1..{k}")
        bins[r - 1] += 1
    return bins


def format_table(rows: Dict[str, EvalReport], hits_at: Sequence[int] = (1, 10)) -> str:
    """Plain-text rows of MRR and HITS@N (percent)."""
    width = max(len(n) for n in rows) if rows else 5
    cols = ["MRR"] + [f"H{n}" for n in hits_at]
    lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>6}" for c in cols)]
    for name, rep in rows.items():
        vals = [f"{rep.mrr:6.3f}"] + [f"{rep.hits[n]:6.1f}" for n in hits_at]
        lines.append(f"{name:<{width}}  " + "  ".join(vals))
    return "\n".join(lines)
