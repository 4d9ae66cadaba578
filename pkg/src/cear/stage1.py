"""Stage-1 embedding models (ComplEx, RotatE), negative-sampling training and top-k candidates."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .kb import Direction, FilterIndex, KnowledgeBase, Query

logger = logging.getLogger(__name__)


class ModelKind(str, enum.Enum):
    COMPLEX = "complex"
    ROTATE = "rotate"


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite during training."""


def _as_complex(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_complex() else x.to(torch.complex128)
    return torch.as_tensor(np.asarray(x, dtype=np.complex128))


def _check_dims(*vectors: torch.Tensor) -> None:
    dims = {v.shape[-1] for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"embedding dimension mismatch: {sorted(dims)}")


def complex_score(e_s, w_r, e_o):
    """ComplEx trilinear score ``sum_i Re(e_s[i] * w_r[i] * conj(e_o[i]))``.

    Accepts numpy or torch complex arrays; leading dimensions broadcast.
    Returns a Python float for numpy inputs and a tensor for torch inputs.
    """
    as_tensor = isinstance(e_s, torch.Tensor)
    e_s, w_r, e_o = _as_complex(e_s), _as_complex(w_r), _as_complex(e_o)
    _check_dims(e_s, w_r, e_o)
    out = ((e_s * w_r) * e_o.conj()).real.sum(-1)
    if as_tensor:
        return out
    return float(out) if out.ndim == 0 else out.numpy()


def rotate_score(e_s, phase, e_o, gamma: float):
    """RotatE score ``gamma - sum_i |e_s[i] * exp(i*phase[i]) - e_o[i]|``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    as_tensor = isinstance(e_s, torch.Tensor)
    e_s, e_o = _as_complex(e_s), _as_complex(e_o)
    phase = phase if isinstance(phase, torch.Tensor) else torch.as_tensor(np.asarray(phase, dtype=np.float64))
    _check_dims(e_s, phase, e_o)
    rot = torch.polar(torch.ones_like(phase), phase)
    out = gamma - (e_s * rot - e_o).abs().sum(-1)
    if as_tensor:
        return out
    return float(out) if out.ndim == 0 else out.numpy()


@dataclass
class Stage1Config:
    kind: ModelKind = ModelKind.COMPLEX
    dim: int = 32
    epochs: int = 100
    lr: float = 1e-3
    negatives: int = 32
    batch_size: int = 256
    regularization: float = 0.0  # N3 weight, ComplEx only
    gamma: float = 6.0  # RotatE margin
    seed: int = 0

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


class Stage1Model(nn.Module):
    """Entity/relation embedding tables in double precision.

    Entities are complex vectors stored as real and imaginary parts. ComplEx
    relations are free complex vectors; RotatE relations are phases, so every
    relation coordinate has modulus one by construction.
    """

    def __init__(self, kind, num_entities: int, num_relations: int, dim: int,
                 gamma: float = 6.0, seed: int = 0):
        super().__init__()
        self.kind = ModelKind(kind)
        self.dim = dim
        self.gamma = float(gamma)
        self.seed = seed
        g = torch.Generator().manual_seed(seed)

        def uniform(rows, lo, hi):
            return nn.Parameter(torch.rand(rows, dim, generator=g, dtype=torch.float64) * (hi - lo) + lo)

        self.ent_re = uniform(num_entities, -0.1, 0.1)
        self.ent_im = uniform(num_entities, -0.1, 0.1)
        if self.kind is ModelKind.COMPLEX:
            self.rel_re = uniform(num_relations, -0.1, 0.1)
            self.rel_im = uniform(num_relations, -0.1, 0.1)
        else:
            self.rel_phase = uniform(num_relations, 0.0, 2 * math.pi)

    @property
    def num_entities(self) -> int:
        return self.ent_re.shape[0]

    @property
    def num_relations(self) -> int:
        table = self.rel_re if self.kind is ModelKind.COMPLEX else self.rel_phase
        return table.shape[0]

    def entity(self, idx) -> torch.Tensor:
        return torch.complex(self.ent_re[idx], self.ent_im[idx])

    def relation(self, idx) -> torch.Tensor:
        if self.kind is ModelKind.COMPLEX:
            return torch.complex(self.rel_re[idx], self.rel_im[idx])
        phase = self.rel_phase[idx]
        return torch.polar(torch.ones_like(phase), phase)

    def _score(self, e_s: torch.Tensor, rel: torch.Tensor, e_o: torch.Tensor) -> torch.Tensor:
        if self.kind is ModelKind.COMPLEX:
            return ((e_s * rel) * e_o.conj()).real.sum(-1)
        return self.gamma - (e_s * rel - e_o).abs().sum(-1)

    def score_triples(self, s, r, o) -> torch.Tensor:
        """Scores for aligned index tensors (broadcastable)."""
        return self._score(self.entity(s), self.relation(r), self.entity(o))

    def score_all(self, known: torch.Tensor, r: torch.Tensor, tail: torch.Tensor) -> torch.Tensor:
        """(batch, |E|) scores of every entity filling the missing slot.

        ``tail`` is a bool tensor: True for <known, r, ?>, False for <?, r, known>.
        """
        ents = self.entity(slice(None)).unsqueeze(0)  # 1 x E x d
        k = self.entity(known).unsqueeze(1)  # B x 1 x d
        rel = self.relation(r).unsqueeze(1)
        tail_scores = self._score(k, rel, ents)
        head_scores = self._score(ents, rel, k)
        return torch.where(tail.unsqueeze(1), tail_scores, head_scores)

    def n3(self, s, r, o) -> torch.Tensor:
        terms = self.entity(s).abs().pow(3).sum(-1) + self.entity(o).abs().pow(3).sum(-1)
        if self.kind is ModelKind.COMPLEX:
            terms = terms + self.relation(r).abs().pow(3).sum(-1)
        return terms.mean()


def stage1_loss(model: Stage1Model, triples: torch.Tensor, neg_tails: torch.Tensor,
                neg_heads: torch.Tensor, regularization: float = 0.0) -> torch.Tensor:
    """Binary cross-entropy over each positive and its corrupted tails/heads.

    ``triples`` is (B, 3); ``neg_tails``/``neg_heads`` are (B, n) entity ids.
    """
    s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
    pos = model.score_triples(s, r, o)
    neg_t = model.score_triples(s.unsqueeze(1), r.unsqueeze(1), neg_tails)
    neg_h = model.score_triples(neg_heads, r.unsqueeze(1), o.unsqueeze(1))
    loss = F.softplus(-pos).mean() + 0.5 * (F.softplus(neg_t).mean() + F.softplus(neg_h).mean())
    if regularization and model.kind is ModelKind.COMPLEX:
        loss = loss + regularization * model.n3(s, r, o)
    return loss


def train_stage1(kb: KnowledgeBase, config: Stage1Config, history: Optional[List[float]] = None) -> Stage1Model:
    """Train on ``kb``'s train split; deterministic given ``config.seed``."""
    model = Stage1Model(config.kind, kb.num_entities, kb.num_relations, config.dim, config.gamma, config.seed)
    train = torch.tensor([tuple(t) for t in kb.triples("train")], dtype=torch.long).reshape(-1, 3)
    if config.epochs <= 0 or len(train) == 0:
        return model.eval()

    g = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    n_ent = kb.num_entities
    for epoch in range(config.epochs):
        perm = torch.randperm(len(train), generator=g)
        total, count = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            batch = train[perm[start:start + config.batch_size]]
            neg_t = torch.randint(n_ent, (len(batch), config.negatives), generator=g)
            neg_h = torch.randint(n_ent, (len(batch), config.negatives), generator=g)
            loss = stage1_loss(model, batch, neg_t, neg_h, config.regularization)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite stage-1 loss at epoch {epoch}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        mean = total / count
        if history is not None:
            history.append(mean)
        logger.info("stage1 epoch %d loss %.6f", epoch + 1, mean)
    return model.eval()


@dataclass
class CandidateSet:
    query: Query
    entity_ids: List[int]
    scores: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entity_ids)


def _query_tensors(queries: Sequence[Query]):
    known = torch.tensor([q.known for q in queries], dtype=torch.long)
    rel = torch.tensor([q.r for q in queries], dtype=torch.long)
    tail = torch.tensor([Direction(q.direction) is Direction.TAIL for q in queries], dtype=torch.bool)
    return known, rel, tail


@torch.no_grad()
def score_queries(model: Stage1Model, queries: Sequence[Query], chunk: int = 256) -> np.ndarray:
    """(len(queries), |E|) raw Stage-1 scores."""
    out = np.empty((len(queries), model.num_entities), dtype=np.float64)
    for start in range(0, len(queries), chunk):
        part = queries[start:start + chunk]
        out[start:start + len(part)] = model.score_all(*_query_tensors(part)).numpy()
    return out


def rank_entities(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Entity ids by descending score, ties by ascending id, ``exclude`` removed."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    if exclude:
        order = order[~np.isin(order, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))]
    return order


def candidates_from_scores(query: Query, scores: np.ndarray, k: int,
                           filter_index: Optional[FilterIndex] = None) -> CandidateSet:
    exclude = ()
    if filter_index is not None:
        exclude = filter_index.for_query(query) - {query.gold}
    order = rank_entities(scores, exclude)[:k]
    return CandidateSet(query, [int(e) for e in order], [float(scores[e]) for e in order])


def topk_candidates(model: Stage1Model, query: Query, k: int,
                    filter_index: Optional[FilterIndex] = None) -> CandidateSet:
    """The ``k`` best entities for ``query``; known-true non-gold entities are dropped when filtering."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return candidates_from_scores(query, score_queries(model, [query])[0], k, filter_index)


def topk_candidates_batch(model: Stage1Model, queries: Sequence[Query], k: int,
                          filter_index: Optional[FilterIndex] = None) -> List[CandidateSet]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_queries(model, queries)
    return [candidates_from_scores(q, row, k, filter_index) for q, row in zip(queries, scores)]


def export_candidates(path: str, candidate_sets: Sequence[CandidateSet], kb: KnowledgeBase) -> None:
    ent = kb.entities
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for cs in candidate_sets:
            q = cs.query
            record = {
                "known": ent.key(q.known),
                "relation": kb.relations.key(q.r),
                "direction": Direction(q.direction).value,
                "gold": ent.key(q.gold),
                "candidates": [ent.key(e) for e in cs.entity_ids],
                "scores": list(cs.scores),
            }
            f.write(json.dumps(record) + "\n")


def import_candidates(path: str, kb: KnowledgeBase) -> List[CandidateSet]:
    """Read a JSON-lines candidate file, resolving string ids against ``kb``."""
    out = []
    ent, rel = kb.entities, kb.relations
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            where = f"{path}:{lineno}"
            ids, scores = rec["candidates"], rec["scores"]
            if len(ids) != len(scores):
                raise ValueError(f"{where}: {len(ids)} candidates but {len(scores)} scores")
            for key in [rec["known"], rec["gold"], *ids]:
                if key not in ent:
                    raise ValueError(f"{where}: unknown entity id {key!r}")
            if rec["relation"] not in rel:
                raise ValueError(f"{where}: unknown relation id {rec['relation']!r}")
            query = Query(ent.id(rec["known"]), rel.id(rec["relation"]), Direction(rec["direction"]),
                          ent.id(rec["gold"]))
            out.append(CandidateSet(query, [ent.id(e) for e in ids], [float(x) for x in scores]))
    return out


def save_stage1(path: str, model: Stage1Model, kb: KnowledgeBase) -> None:
    meta = {
        "kind": model.kind.value,
        "dim": model.dim,
        "num_entities": model.num_entities,
        "num_relations": model.num_relations,
        "gamma": model.gamma,
        "seed": model.seed,
        "kb_fingerprint": kb.fingerprint(),
    }
    save_checkpoint(path, "stage1", meta, dict(model.state_dict()))


def load_stage1(path: str, kb: Optional[KnowledgeBase] = None) -> Stage1Model:
    meta, arrays = load_checkpoint(path, "stage1")
    if kb is not None and meta["kb_fingerprint"] != kb.fingerprint():
        raise CheckpointError(f"{path}: checkpoint was trained on a different entity/relation vocabulary")
    model = Stage1Model(meta["kind"], meta["num_entities"], meta["num_relations"], meta["dim"],
                        meta["gamma"], meta["seed"])
    model.load_state_dict(arrays)
    return model.eval()
