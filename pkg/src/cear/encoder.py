"""Whitespace tokenizer, a small pre-norm transformer encoder, span pooling and masked-LM pretraining."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .kb import KnowledgeBase
from .stage1 import TrainingDivergedError

logger = logging.getLogger(__name__)

CLS, SPC, SEP, PAD, MASK, UNK = "[CLS]", "[SPC]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (CLS, SPC, SEP, PAD, MASK, UNK)
INV = "[INV]"


class Vocab:
    """Token <-> id map; the six special tokens always hold ids 0-5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(SPECIALS)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: object) -> bool:
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def spc_id(self) -> int:
        return self.stoi[SPC]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def mask_id(self) -> int:
        return self.stoi[MASK]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.itos[len(SPECIALS):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))


def build_vocab(kb: KnowledgeBase, min_freq: float = 1, extra_tokens: Sequence[str] = ()) -> Vocab:
    """Tokens occurring in at least ``min_freq`` entity/relation surface forms.

    Ordered by descending frequency, then alphabetically. ``extra_tokens``
    (e.g. the head-direction marker) come right after the specials.
    """
    counts: Counter = Counter()
    for vocab in (kb.entities, kb.relations):
        for surface in vocab.surfaces:
            counts.update(surface.split())
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab([*extra_tokens, *kept])


def tokenize(text: str, vocab: Vocab, max_tokens: int) -> List[int]:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    words = text.lower().split()
    if not words:
        return [vocab.unk_id]
    return [vocab[w] for w in words[:max_tokens]]


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 256
    max_len: int = 512
    final_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor, return_weights: bool = False):
        b, n, h = x.shape
        d = h // self.heads

        def split(t):
            return t.view(b, n, self.heads, d).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(-1)
        ctx = (weights @ v).transpose(1, 2).reshape(b, n, h)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden)
        self.ff = nn.Sequential(nn.Linear(hidden, ff), nn.GELU(), nn.Linear(ff, hidden))

    def forward(self, x, key_mask, return_weights=False):
        attn = self.attn(self.norm1(x), key_mask, return_weights)
        if return_weights:
            attn, weights = attn
        x = x + attn
        x = x + self.ff(self.norm2(x))
        return (x, weights) if return_weights else x


class TransformerEncoder(nn.Module):
    """Token + learned position embeddings followed by pre-norm self-attention blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.tok_emb = nn.Embedding(config.vocab_size, config.hidden)
            self.pos_emb = nn.Embedding(config.max_len, config.hidden)
            nn.init.normal_(self.tok_emb.weight, std=0.02)
            nn.init.normal_(self.pos_emb.weight, std=0.02)
            self.layers = nn.ModuleList(
                EncoderLayer(config.hidden, config.heads, config.ff) for _ in range(config.layers)
            )
        self.final_norm = nn.LayerNorm(config.hidden) if config.final_norm else nn.Identity()

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def forward(self, token_ids: torch.Tensor, pad_mask: Optional[torch.Tensor] = None,
                return_weights: bool = False):
        """Contextual embeddings, (B, L, h) or (L, h) for unbatched input.

        ``pad_mask`` is True at real tokens. With ``return_weights`` the
        per-layer attention weights (B, heads, L, L) are returned as well.
        """
        unbatched = token_ids.dim() == 1
        if unbatched:
            token_ids = token_ids.unsqueeze(0)
            pad_mask = None if pad_mask is None else pad_mask.unsqueeze(0)
        length = token_ids.shape[1]
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds encoder limit {self.config.max_len}")
        if pad_mask is None:
            pad_mask = torch.ones_like(token_ids, dtype=torch.bool)
        pos = torch.arange(length, device=token_ids.device)
        x = self.tok_emb(token_ids) + self.pos_emb(pos)[None]
        all_weights = []
        for layer in self.layers:
            if return_weights:
                x, w = layer(x, pad_mask, True)
                all_weights.append(w)
            else:
                x = layer(x, pad_mask)
        x = self.final_norm(x)
        if unbatched:
            x = x[0]
            all_weights = [w[0] for w in all_weights]
        return (x, all_weights) if return_weights else x


def encode(params: TransformerEncoder, token_ids, pad_mask=None) -> torch.Tensor:
    token_ids = torch.as_tensor(token_ids, dtype=torch.long)
    if pad_mask is not None:
        pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
    return params(token_ids, pad_mask)


def pool_entity_spans(contextual: torch.Tensor, spans: Sequence[Tuple[int, int]]) -> torch.Tensor:
    """Mean of rows ``start .. start+len-1`` for every span; returns (k, h)."""
    length = contextual.shape[0]
    for start, size in spans:
        if size < 1:
            raise ValueError(f"zero-length span at {start}")
        if start < 0 or start + size > length:
            raise ValueError(f"span ({start}, {size}) out of bounds for length {length}")
    weights = contextual.new_zeros(len(spans), length)
    for j, (start, size) in enumerate(spans):
        weights[j, start:start + size] = 1.0 / size
    return weights @ contextual


class MlmHead(nn.Module):
    """Transform + output projection tied to the token embedding table."""

    def __init__(self, encoder: TransformerEncoder, seed: int = 0):
        super().__init__()
        h = encoder.hidden
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.transform = nn.Sequential(nn.Linear(h, h), nn.GELU(), nn.LayerNorm(h))
        self.bias = nn.Parameter(torch.zeros(encoder.config.vocab_size))
        self._encoder = [encoder]  # not registered: weights are tied, not owned

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.transform(hidden) @ self._encoder[0].tok_emb.weight.T + self.bias


@dataclass
class MlmConfig:
    mask_prob: float = 0.15
    epochs: int = 10
    lr: float = 1e-3
    token_budget: int = 5000
    seed: int = 0


def pack_batches(lengths: Sequence[int], order: Sequence[int], token_budget: int) -> List[List[int]]:
    """Greedily group indices (in ``order``) so padded size ``n * max_len`` stays within budget."""
    batches: List[List[int]] = []
    current: List[int] = []
    longest = 0
    for idx in order:
        idx = int(idx)
        new_longest = max(longest, lengths[idx])
        if current and new_longest * (len(current) + 1) > token_budget:
            batches.append(current)
            current, new_longest = [], lengths[idx]
        current.append(idx)
        longest = new_longest
    if current:
        batches.append(current)
    return batches


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
    longest = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), longest), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, ids != pad_id


def mask_tokens(ids: torch.Tensor, real: torch.Tensor, vocab: Vocab, mask_prob: float,
                generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """BERT-style corruption: of the selected positions 80% -> [MASK], 10% random, 10% kept.

    Returns (corrupted ids, targets) with targets -100 where nothing is predicted.
    """
    maskable = real & (ids >= len(SPECIALS))
    chosen = (torch.rand(ids.shape, generator=generator) < mask_prob) & maskable
    targets = torch.where(chosen, ids, torch.full_like(ids, -100))
    roll = torch.rand(ids.shape, generator=generator)
    random_ids = torch.randint(len(SPECIALS), max(len(vocab), len(SPECIALS) + 1), ids.shape, generator=generator)
    corrupted = ids.clone()
    corrupted[chosen & (roll < 0.8)] = vocab.mask_id
    swap = chosen & (roll >= 0.8) & (roll < 0.9)
    corrupted[swap] = random_ids[swap]
    return corrupted, targets


def mlm_loss(encoder: TransformerEncoder, head: MlmHead, ids, real, targets) -> torch.Tensor:
    if not (targets != -100).any():
        return torch.zeros((), dtype=encoder.tok_emb.weight.dtype)
    logits = head(encoder(ids, real))
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def _corpus_loss(encoder, head, corpus, vocab, mask_prob, seed, token_budget) -> float:
    g = torch.Generator().manual_seed(seed)
    lengths = [len(s) for s in corpus]
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in pack_batches(lengths, range(len(corpus)), token_budget):
            ids, real = pad_sequences([corpus[i] for i in batch], vocab.pad_id)
            corrupted, targets = mask_tokens(ids, real, vocab, mask_prob, g)
            n = int((targets != -100).sum())
            if n:
                total += mlm_loss(encoder, head, corrupted, real, targets).item() * n
                count += n
    return total / count if count else 0.0


def mlm_pretrain(encoder: TransformerEncoder, corpus: Sequence[Sequence[int]], vocab: Vocab,
                 config: MlmConfig, history: Optional[List[float]] = None) -> TransformerEncoder:
    """Masked-token pretraining in place; returns ``encoder``.

    When ``history`` is given it receives the masked-token loss before any
    update followed by one entry per epoch, each measured on the same fixed
    masking draw. Batches whose draw masks nothing skip the update, so
    ``mask_prob=0`` leaves the parameters untouched.
    """
    corpus = [list(s) for s in corpus if len(s) > 0]
    if config.epochs <= 0 or not corpus:
        return encoder
    head = MlmHead(encoder, seed=config.seed)
    head.to(encoder.tok_emb.weight.dtype)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    g = torch.Generator().manual_seed(config.seed)
    lengths = [len(s) for s in corpus]

    def measure():
        encoder.eval()
        value = _corpus_loss(encoder, head, corpus, vocab, config.mask_prob, config.seed + 1, config.token_budget)
        encoder.train()
        return value

    if history is not None:
        history.append(measure())
    encoder.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(corpus), generator=g).tolist()
        total, steps = 0.0, 0
        for batch in pack_batches(lengths, order, config.token_budget):
            ids, real = pad_sequences([corpus[i] for i in batch], vocab.pad_id)
            corrupted, targets = mask_tokens(ids, real, vocab, config.mask_prob, g)
            loss = mlm_loss(encoder, head, corrupted, real, targets)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite MLM loss at epoch {epoch}")
            total += loss.item()
            steps += 1
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
        logger.info("mlm epoch %d train loss %.4f", epoch + 1, total / max(steps, 1))
        if history is not None:
            history.append(measure())
    encoder.eval()
    return encoder


def save_encoder(path: str, encoder: TransformerEncoder, vocab: Vocab, extra_meta: Optional[dict] = None) -> None:
    meta = {"config": asdict(encoder.config), "vocab": vocab.itos, **(extra_meta or {})}
    save_checkpoint(path, "encoder", meta, dict(encoder.state_dict()))


def load_encoder(path: str) -> Tuple[TransformerEncoder, Vocab, dict]:
    meta, arrays = load_checkpoint(path, "encoder")
    encoder = TransformerEncoder(EncoderConfig(**meta["config"]))
    encoder.load_state_dict(arrays)
    vocab = Vocab(meta["vocab"][len(SPECIALS):])
    return encoder.eval(), vocab, meta
