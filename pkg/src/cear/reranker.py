"""Cross-entity aware reranking of Stage-1 candidates.

The query and all k candidates are packed into one token sequence
``[CLS] s [SPC] r [SEP] o1 [SEP] ... [SEP] ok``; each candidate's contextual
token embeddings are mean pooled and scored by a small MLP.
"""

from __future__ import annotations

import copy
import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import (INV, SPECIALS, EncoderConfig, TransformerEncoder, Vocab, pack_batches,
                      pool_entity_spans, tokenize)
from .kb import Direction, FilterIndex, KnowledgeBase, Query
from .stage1 import CandidateSet, TrainingDivergedError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

# Defaults from the original training recipe.
DEFAULT_K = 40
DEFAULT_MAX_ENTITY_TOKENS = 10
DEFAULT_MAX_LEN = 512
DEFAULT_EPOCHS = 10
DEFAULT_LR = 2e-5
DEFAULT_TOKEN_BUDGET = 5000


class Ablation(str, enum.Enum):
    NONE = "none"
    RANDOM_INIT = "random-init"
    INDEPENDENT = "independent"
    SHUFFLE = "shuffle"


@dataclass
class RerankExample:
    token_ids: List[int]
    spans: List[Tuple[int, int]]
    candidate_ids: List[int]
    labels: List[bool]
    query: Query
    stage1_ranks: List[int]  # 1-based Stage-1 position of each packed candidate

    @property
    def k(self) -> int:
        return len(self.candidate_ids)

    @property
    def prefix(self) -> List[int]:
        """Query tokens up to and including the [SEP] before the first candidate."""
        return self.token_ids[:self.spans[0][0]]

    def candidate_tokens(self, j: int) -> List[int]:
        start, size = self.spans[j]
        return self.token_ids[start:start + size]


def shuffle_permutation(query: Query, k: int, seed: int) -> List[int]:
    """Fixed per-query permutation used by the shuffle ablation."""
    rng = np.random.default_rng([seed, query.known, query.r, 0 if Direction(query.direction) is Direction.TAIL else 1])
    return [int(i) for i in rng.permutation(k)]


def build_input(query: Query, candidates: CandidateSet, kb: KnowledgeBase, vocab: Vocab,
                k: int = DEFAULT_K, max_entity_tokens: int = DEFAULT_MAX_ENTITY_TOKENS,
                max_len: int = DEFAULT_MAX_LEN, positives: Optional[frozenset] = None,
                shuffle_seed: Optional[int] = None) -> RerankExample:
    """Pack a query and its top-``k`` candidates into one sequence.

    Head queries put the known object first and mark the relation with [INV].
    ``positives`` holds the entities that complete a known fact for this query
    (defaults to ``{gold}``). Candidates that would push the sequence past
    ``max_len`` are dropped, lowest Stage-1 rank first.
    """
    if len(candidates.entity_ids) == 0:
        raise ValueError("empty candidate list")
    ents = candidates.entity_ids[:k]
    ranks = list(range(1, len(ents) + 1))
    order = list(range(len(ents)))
    if shuffle_seed is not None:
        order = shuffle_permutation(query, len(ents), shuffle_seed)

    prefix = [vocab.cls_id] + tokenize(kb.entities.surface(query.known), vocab, max_entity_tokens)
    prefix.append(vocab.spc_id)
    if Direction(query.direction) is Direction.HEAD:
        if INV not in vocab:
            raise ValueError(f"vocabulary lacks the {INV} token needed for head queries")
        prefix.append(vocab[INV])
    prefix += tokenize(kb.relations.surface(query.r), vocab, max_entity_tokens)

    cand_tokens = {j: tokenize(kb.entities.surface(ents[j]), vocab, max_entity_tokens) for j in order}
    total = len(prefix) + sum(1 + len(t) for t in cand_tokens.values())
    kept = list(order)
    while total > max_len and len(kept) > 1:
        worst = max(kept, key=lambda j: ranks[j])
        kept.remove(worst)
        total -= 1 + len(cand_tokens[worst])
    if total > max_len:
        raise ValueError(f"query plus one candidate needs {total} tokens, limit is {max_len}")
    if len(kept) < len(order):
        logger.warning("dropped %d candidates to fit %d tokens", len(order) - len(kept), max_len)

    positives = frozenset([query.gold]) if positives is None else positives
    token_ids = list(prefix)
    spans, cand_ids, labels, s1_ranks = [], [], [], []
    for j in kept:
        token_ids.append(vocab.sep_id)
        spans.append((len(token_ids), len(cand_tokens[j])))
        token_ids += cand_tokens[j]
        cand_ids.append(ents[j])
        labels.append(ents[j] in positives)
        s1_ranks.append(ranks[j])
    return RerankExample(token_ids, spans, cand_ids, labels, query, s1_ranks)


class MlpScorer(nn.Module):
    def __init__(self, hidden: int, width: Optional[int] = None):
        super().__init__()
        width = width or hidden
        self.hidden = nn.Linear(hidden, width)
        self.output = nn.Linear(width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(F.gelu(self.hidden(x))).squeeze(-1)


class RerankerModel(nn.Module):
    def __init__(self, encoder: TransformerEncoder, vocab: Vocab, k: int = DEFAULT_K,
                 max_entity_tokens: int = DEFAULT_MAX_ENTITY_TOKENS, max_len: Optional[int] = None,
                 ablation: Ablation = Ablation.NONE, shuffle_seed: int = 0, seed: int = 0):
        super().__init__()
        if k < 1 or max_entity_tokens < 1:
            raise ValueError("k and max_entity_tokens must be >= 1")
        self.encoder = encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.scorer = MlpScorer(encoder.hidden)
        self.scorer.to(encoder.tok_emb.weight.dtype)
        self.vocab = vocab
        self.k = k
        self.max_entity_tokens = max_entity_tokens
        self.max_len = min(max_len or encoder.config.max_len, encoder.config.max_len)
        self.ablation = Ablation(ablation)
        self.shuffle_seed = shuffle_seed
        self.seed = seed

    @property
    def independent(self) -> bool:
        return self.ablation is Ablation.INDEPENDENT

    def build(self, kb: KnowledgeBase, candidates: CandidateSet, positives: Optional[frozenset] = None,
              k: Optional[int] = None) -> RerankExample:
        shuffle = self.shuffle_seed if self.ablation is Ablation.SHUFFLE else None
        return build_input(candidates.query, candidates, kb, self.vocab, k or self.k, self.max_entity_tokens,
                           self.max_len, positives, shuffle)


def score_candidates(model: RerankerModel, example: RerankExample) -> torch.Tensor:
    """Scores for the packed candidates, in packed order.

    Joint mode runs one encoder pass over the whole sequence. Independent mode
    encodes ``[CLS] s [SPC] r [SEP] o_j`` separately for each candidate, so a
    score never depends on the other candidates.
    """
    if not model.independent:
        hidden = model.encoder(torch.as_tensor(example.token_ids, dtype=torch.long))
        return model.scorer(pool_entity_spans(hidden, example.spans))
    prefix = example.prefix
    scores = []
    for j in range(example.k):
        seq = prefix + example.candidate_tokens(j)
        hidden = model.encoder(torch.as_tensor(seq, dtype=torch.long))
        pooled = pool_entity_spans(hidden, [(len(prefix), example.spans[j][1])])
        scores.append(model.scorer(pooled))
    return torch.cat(scores)


def _pool_batch(hidden: torch.Tensor, span_lists: Sequence[Sequence[Tuple[int, int]]]) -> torch.Tensor:
    b, length, _ = hidden.shape
    kmax = max(len(s) for s in span_lists)
    weights = hidden.new_zeros(b, kmax, length)
    for i, spans in enumerate(span_lists):
        for j, (start, size) in enumerate(spans):
            weights[i, j, start:start + size] = 1.0 / size
    return weights @ hidden


def _encode_padded(model: RerankerModel, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    longest = max(len(s) for s in seqs)
    pad = model.vocab.pad_id
    ids = torch.full((len(seqs), longest), pad, dtype=torch.long)
    real = torch.zeros((len(seqs), longest), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
        real[i, :len(s)] = True
    return model.encoder(ids, real)


def score_batch(model: RerankerModel, examples: Sequence[RerankExample]) -> List[torch.Tensor]:
    """Batched equivalent of :func:`score_candidates` (equal up to float rounding)."""
    if not model.independent:
        hidden = _encode_padded(model, [ex.token_ids for ex in examples])
        scores = model.scorer(_pool_batch(hidden, [ex.spans for ex in examples]))
        return [scores[i, :ex.k] for i, ex in enumerate(examples)]
    seqs, spans = [], []
    for ex in examples:
        prefix = ex.prefix
        for j in range(ex.k):
            seqs.append(prefix + ex.candidate_tokens(j))
            spans.append([(len(prefix), ex.spans[j][1])])
    hidden = _encode_padded(model, seqs)
    flat = model.scorer(_pool_batch(hidden, spans))[:, 0]
    out, pos = [], 0
    for ex in examples:
        out.append(flat[pos:pos + ex.k])
        pos += ex.k
    return out


def rerank_loss(scores, labels) -> torch.Tensor:
    """Summed binary cross-entropy of sigmoid scores against 0/1 labels.

    Log-probabilities are clamped at log(1e-12).
    """
    scores = torch.as_tensor(scores, dtype=torch.float64) if not isinstance(scores, torch.Tensor) else scores
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    floor = float(np.log(LOG_CLAMP))
    log_p = F.logsigmoid(scores).clamp(min=floor)
    log_not_p = F.logsigmoid(-scores).clamp(min=floor)
    return -(labels * log_p + (1 - labels) * log_not_p).sum()


def example_cost(model: RerankerModel, ex: RerankExample) -> int:
    if model.independent:
        return ex.k * (len(ex.prefix) + max(s for _, s in ex.spans))
    return len(ex.token_ids)


@dataclass
class Stage2Config:
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    token_budget: int = DEFAULT_TOKEN_BUDGET
    seed: int = 0
    inject_gold: bool = False


@dataclass
class TrainResult:
    model: RerankerModel
    initial_loss: float
    epoch_losses: List[float] = field(default_factory=list)
    valid_hits1: List[float] = field(default_factory=list)
    best_epoch: int = 0


def make_examples(model: RerankerModel, kb: KnowledgeBase, candidate_sets: Sequence[CandidateSet],
                  positives_index: Optional[FilterIndex] = None, inject_gold: bool = False) -> List[RerankExample]:
    """Training/eval examples; labels mark candidates completing a fact of ``positives_index``."""
    out = []
    for cs in candidate_sets:
        if inject_gold and cs.query.gold not in cs.entity_ids[:model.k]:
            ents = list(cs.entity_ids[:model.k])
            ents[-1] = cs.query.gold
            cs = CandidateSet(cs.query, ents, list(cs.scores[:model.k]))
        positives = None if positives_index is None else positives_index.for_query(cs.query)
        out.append(model.build(kb, cs, positives))
    return out


def _batch_loss(model, batch):
    scores = score_batch(model, batch)
    losses = [rerank_loss(s, torch.as_tensor(ex.labels, dtype=s.dtype)) for s, ex in zip(scores, batch)]
    return torch.stack(losses).sum()


@torch.no_grad()
def mean_loss(model: RerankerModel, examples: Sequence[RerankExample], token_budget: int) -> float:
    model.eval()
    costs = [example_cost(model, ex) for ex in examples]
    total = 0.0
    for batch in pack_batches(costs, range(len(examples)), token_budget):
        total += _batch_loss(model, [examples[i] for i in batch]).item()
    return total / max(len(examples), 1)


def predictions(model: RerankerModel, examples: Sequence[RerankExample], token_budget: int = DEFAULT_TOKEN_BUDGET
                ) -> List[np.ndarray]:
    """Scores per example (packed order), computed in token-budget batches."""
    model.eval()
    costs = [example_cost(model, ex) for ex in examples]
    out: List[Optional[np.ndarray]] = [None] * len(examples)
    with torch.no_grad():
        for batch in pack_batches(costs, range(len(examples)), token_budget):
            for i, s in zip(batch, score_batch(model, [examples[i] for i in batch])):
                out[i] = s.double().numpy()
    return out  # type: ignore[return-value]


def order_by_scores(scores: np.ndarray, stage1_ranks: Sequence[int]) -> List[int]:
    """Packed indices by descending score, ties by Stage-1 rank."""
    return sorted(range(len(scores)), key=lambda j: (-scores[j], stage1_ranks[j]))


def hits_at_1(examples: Sequence[RerankExample], scores: Sequence[np.ndarray]) -> float:
    if not examples:
        return 0.0
    hits = 0
    for ex, s in zip(examples, scores):
        top = order_by_scores(s, ex.stage1_ranks)[0]
        hits += ex.candidate_ids[top] == ex.query.gold
    return 100.0 * hits / len(examples)


def train_stage2(model: RerankerModel, kb: KnowledgeBase, train_sets: Sequence[CandidateSet],
                 config: Stage2Config, valid_sets: Optional[Sequence[CandidateSet]] = None,
                 train_positives: Optional[FilterIndex] = None) -> TrainResult:
    """Minimise the mean per-sequence BCE loss with token-budget batches.

    With ``valid_sets`` the parameters with the best validation HITS@1 are
    kept (ties favour the earlier epoch); otherwise the last epoch's are.
    """
    examples = make_examples(model, kb, train_sets, train_positives, config.inject_gold)
    valid = make_examples(model, kb, valid_sets) if valid_sets else []
    result = TrainResult(model, initial_loss=mean_loss(model, examples, config.token_budget) if examples else 0.0)
    if config.epochs <= 0 or not examples:
        return result

    costs = [example_cost(model, ex) for ex in examples]
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    best_state, best_h1 = None, -1.0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(len(examples), generator=g).tolist()
        total = 0.0
        for batch in pack_batches(costs, order, config.token_budget):
            loss = _batch_loss(model, [examples[i] for i in batch])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite stage-2 loss at epoch {epoch}")
            opt.zero_grad()
            (loss / len(batch)).backward()
            opt.step()
            total += loss.item()
        result.epoch_losses.append(total / len(examples))
        msg = f"stage2 epoch {epoch} loss {result.epoch_losses[-1]:.4f}"
        if valid:
            h1 = hits_at_1(valid, predictions(model, valid, config.token_budget))
            result.valid_hits1.append(h1)
            msg += f" valid H1 {h1:.2f}"
            if h1 > best_h1:
                best_h1, best_state, result.best_epoch = h1, copy.deepcopy(model.state_dict()), epoch
        logger.info(msg)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = config.epochs
    model.eval()
    return result


def rerank(model: RerankerModel, kb: KnowledgeBase, candidates: CandidateSet) -> CandidateSet:
    """Reorder candidates by descending Stage-2 score (ties keep Stage-1 order)."""
    example = model.build(kb, candidates)
    model.eval()
    with torch.no_grad():
        scores = score_candidates(model, example).double().numpy()
    order = order_by_scores(scores, example.stage1_ranks)
    return CandidateSet(candidates.query, [example.candidate_ids[j] for j in order],
                        [float(scores[j]) for j in order])


def save_reranker(path: str, model: RerankerModel, kb: Optional[KnowledgeBase] = None,
                  extra_meta: Optional[dict] = None) -> None:
    meta = {
        "encoder": asdict(model.encoder.config),
        "vocab": model.vocab.itos,
        "k": model.k,
        "max_entity_tokens": model.max_entity_tokens,
        "max_len": model.max_len,
        "ablation": model.ablation.value,
        "shuffle_seed": model.shuffle_seed,
        "seed": model.seed,
        "kb_fingerprint": kb.fingerprint() if kb is not None else None,
        **(extra_meta or {}),
    }
    save_checkpoint(path, "reranker", meta, dict(model.state_dict()))


def load_reranker(path: str, kb: Optional[KnowledgeBase] = None) -> Tuple[RerankerModel, Dict]:
    meta, arrays = load_checkpoint(path, "reranker")
    if kb is not None and meta.get("kb_fingerprint") not in (None, kb.fingerprint()):
        raise CheckpointError(f"{path}: reranker was trained on a different KB")
    encoder = TransformerEncoder(EncoderConfig(**meta["encoder"]))
    vocab = Vocab(meta["vocab"][len(SPECIALS):])
    model = RerankerModel(encoder, vocab, meta["k"], meta["max_entity_tokens"], meta["max_len"],
                          Ablation(meta["ablation"]), meta["shuffle_seed"], meta["seed"])
    model.load_state_dict(arrays)
    return model.eval(), meta
