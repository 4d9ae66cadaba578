import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cear.encoder import (INV, SPECIALS, EncoderConfig, MlmConfig, TransformerEncoder, Vocab, build_vocab, encode,
                          load_encoder, mask_tokens, mlm_pretrain, pack_batches, pad_sequences, pool_entity_spans,
                          save_encoder, tokenize)
from cear.kb import KnowledgeBase, Vocabulary

from test_stage1 import central_diff, rel_err


def kb_with_surfaces(entity_surfaces, relation_surfaces=()):
    kb = KnowledgeBase(Vocabulary(), Vocabulary())
    for i, s in enumerate(entity_surfaces):
        kb.entities.add(f"e{i}", s)
    for i, s in enumerate(relation_surfaces):
        kb.relations.add(f"r{i}", s)
    return kb


def small_encoder(vocab_size=20, hidden=16, layers=2, heads=4, ff=32, max_len=32, seed=0, double=False):
    enc = TransformerEncoder(EncoderConfig(vocab_size, hidden, layers, heads, ff, max_len, seed=seed))
    return enc.double().eval() if double else enc.eval()


# ---- vocabulary and tokenizer ----------------------------------------------

def test_vocab_hand_count():
    vocab = build_vocab(kb_with_surfaces(["new york", "york"]), 1)
    assert len(vocab) == 8
    assert vocab.itos[:6] == list(SPECIALS)
    assert set(vocab.itos[6:]) == {"new", "york"}
    # york occurs twice, so it is ranked first
    assert vocab.itos[6] == "york"


def test_vocab_empty_and_infinite_threshold():
    assert len(build_vocab(kb_with_surfaces([]), 1)) == 6
    vocab = build_vocab(kb_with_surfaces(["new york"]), math.inf)
    assert len(vocab) == 6
    assert tokenize("new york", vocab, 10) == [vocab.unk_id, vocab.unk_id]


def test_vocab_extra_tokens_follow_specials():
    vocab = build_vocab(kb_with_surfaces(["a b"]), 1, [INV])
    assert vocab[INV] == 6


def test_special_ids_fixed():
    v = Vocab(["x"])
    assert (v.cls_id, v.spc_id, v.sep_id, v.pad_id, v.mask_id, v.unk_id) == (0, 1, 2, 3, 4, 5)
    assert v.add("x") == 6 and len(v) == 7


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(kb_with_surfaces(["new york", "paris"], ["capital of"]), 1, [INV])
    v.save(str(tmp_path / "vocab.txt"))
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[0] == INV and len(lines) == len(v) - 6
    assert Vocab.load(str(tmp_path / "vocab.txt")) == v


def test_tokenize():
    vocab = Vocab(f"w{i}" for i in range(12))
    ids = tokenize(" ".join(f"W{i}" for i in range(12)), vocab, 10)
    assert ids == [vocab[f"w{i}"] for i in range(10)]
    assert tokenize("", vocab, 10) == [vocab.unk_id]
    assert tokenize("   ", vocab, 10) == [vocab.unk_id]
    v2 = Vocab(["new", "york"])
    assert tokenize("New York", v2, 10) == [v2["new"], v2["york"]]
    with pytest.raises(ValueError):
        tokenize("a", v2, 0)


# ---- encoder ---------------------------------------------------------------

def test_zero_layers_is_embedding_sum():
    enc = small_encoder(layers=0)
    ids = torch.tensor([0, 7, 8, 2])
    want = enc.final_norm(enc.tok_emb(ids) + enc.pos_emb(torch.arange(4)))
    assert torch.equal(encode(enc, ids), want)
    raw = TransformerEncoder(EncoderConfig(20, 16, 0, 4, 32, 32, final_norm=False)).eval()
    assert torch.equal(raw(ids), raw.tok_emb(ids) + raw.pos_emb(torch.arange(4)))


def test_too_long_input_rejected():
    enc = small_encoder(max_len=8)
    with pytest.raises(ValueError):
        encode(enc, torch.zeros(9, dtype=torch.long))


def test_attention_rows_sum_to_one():
    enc = small_encoder()
    ids, real = pad_sequences([[0, 6, 7, 2, 8], [0, 9, 2]], 3)
    _, weights = enc(ids, real, return_weights=True)
    assert len(weights) == 2
    for w in weights:
        sums = w.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        # padded keys receive no weight
        assert torch.all(w[1, :, :, 3:] == 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(6, 19), min_size=1, max_size=12), st.integers(1, 6))
def test_padding_invariance(tokens, n_pad):
    enc = small_encoder()
    alone = encode(enc, tokens)
    ids, real = pad_sequences([tokens, tokens + [6] * n_pad], 3)
    padded = torch.cat([torch.tensor(tokens), torch.full((n_pad,), 3)])
    out = encode(enc, padded, torch.arange(len(padded)) < len(tokens))
    assert torch.allclose(out[:len(tokens)], alone, atol=1e-6)
    batched = enc(ids, real)
    assert torch.allclose(batched[0, :len(tokens)], alone, atol=1e-6)


def test_encode_is_deterministic_and_seeded():
    a, b, c = small_encoder(seed=1), small_encoder(seed=1), small_encoder(seed=2)
    ids = torch.tensor([0, 6, 7, 2])
    assert torch.equal(encode(a, ids), encode(b, ids))
    assert not torch.equal(encode(a, ids), encode(c, ids))


def test_seeding_leaves_global_rng_alone():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    small_encoder(seed=99)
    assert torch.equal(torch.rand(3), expected)


def test_encoder_gradients_match_finite_differences():
    enc = small_encoder(vocab_size=12, hidden=16, layers=2, heads=4, ff=32, max_len=8, seed=3, double=True)
    ids, real = pad_sequences([[0, 6, 7, 2, 8, 9], [0, 10, 2, 11]], 3)
    proj = torch.randn(2, 6, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    params = list(enc.parameters())

    def loss():
        out = enc(ids, real)
        return (out * proj * real[..., None]).sum()

    analytic = torch.autograd.grad(loss(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    with torch.no_grad():
        numeric = central_diff(loss, params)
    for name, a, n in zip([n for n, _ in enc.named_parameters()], analytic, numeric):
        assert rel_err([a], [n]) < 1e-4 or (a.abs().max() < 1e-9 and n.abs().max() < 1e-7), name


# ---- pooling ---------------------------------------------------------------

def test_pool_trivial_cases():
    x = torch.randn(5, 4, dtype=torch.float64)
    assert torch.equal(pool_entity_spans(x, [(2, 1)])[0], x[2])
    same = x[1].repeat(5, 1)
    assert torch.allclose(pool_entity_spans(same, [(0, 5)])[0], x[1])


def test_pool_matches_scalar_mean():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(5, 4))
    got = pool_entity_spans(torch.tensor(m), [(1, 3)])[0].numpy()
    for c in range(4):
        assert got[c] == pytest.approx((m[1, c] + m[2, c] + m[3, c]) / 3, abs=1e-12)


def test_pool_errors():
    x = torch.zeros(4, 2)
    with pytest.raises(ValueError):
        pool_entity_spans(x, [(1, 0)])
    with pytest.raises(ValueError):
        pool_entity_spans(x, [(3, 2)])
    with pytest.raises(ValueError):
        pool_entity_spans(x, [(-1, 1)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_pool_within_span_range(seed, start, size):
    x = torch.randn(20, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    out = pool_entity_spans(x, [(start, size)])[0]
    rows = x[start:start + size]
    assert torch.all(out >= rows.min(0).values - 1e-12)
    assert torch.all(out <= rows.max(0).values + 1e-12)


# ---- batching and MLM -------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(30, 200))
def test_pack_batches_respects_budget(lengths, budget):
    batches = pack_batches(lengths, range(len(lengths)), budget)
    assert [i for b in batches for i in b] == list(range(len(lengths)))
    for b in batches:
        assert len(b) == 1 or len(b) * max(lengths[i] for i in b) <= budget


def test_mask_tokens_only_touches_real_word_tokens():
    vocab = Vocab(f"w{i}" for i in range(10))
    ids, real = pad_sequences([[0, 6, 7, 8, 2, 9], [0, 10, 2]], vocab.pad_id)
    g = torch.Generator().manual_seed(0)
    corrupted, targets = mask_tokens(ids, real, vocab, 1.0, g)
    chosen = targets != -100
    assert torch.equal(chosen, real & (ids >= 6))
    assert torch.equal(corrupted[~chosen], ids[~chosen])
    _, none = mask_tokens(ids, real, vocab, 0.0, g)
    assert torch.all(none == -100)


def toy_corpus(n=200, seed=0):
    # sentences "[CLS] a [SPC] b [SEP] c" where c is determined by (a, b)
    rng = np.random.default_rng(seed)
    vocab = Vocab(f"w{i}" for i in range(12))
    corpus = []
    for _ in range(n):
        a, b = int(rng.integers(6, 12)), int(rng.integers(12, 15))
        corpus.append([vocab.cls_id, a, vocab.spc_id, b, vocab.sep_id, 6 + (a + b) % 11])
    return corpus, vocab


def test_mlm_reduces_loss():
    corpus, vocab = toy_corpus()
    enc = small_encoder(vocab_size=len(vocab), max_len=16)
    hist = []
    mlm_pretrain(enc, corpus, vocab, MlmConfig(epochs=20, lr=3e-3, token_budget=600, seed=0), hist)
    assert len(hist) == 21
    assert hist[-1] < hist[0]


def test_mlm_degenerate_settings_leave_parameters():
    corpus, vocab = toy_corpus(20)
    for cfg in (MlmConfig(epochs=0), MlmConfig(epochs=2, mask_prob=0.0)):
        enc = small_encoder(vocab_size=len(vocab), max_len=16)
        before = [p.detach().clone() for p in enc.parameters()]
        hist = []
        mlm_pretrain(enc, corpus, vocab, cfg, hist)
        assert all(torch.equal(a, b) for a, b in zip(before, enc.parameters()))
        if cfg.epochs:
            assert hist == [0.0] * 3


def test_mlm_deterministic():
    corpus, vocab = toy_corpus(50)
    runs = []
    for _ in range(2):
        enc = small_encoder(vocab_size=len(vocab), max_len=16)
        mlm_pretrain(enc, corpus, vocab, MlmConfig(epochs=2, token_budget=200, seed=4))
        runs.append(list(enc.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(*runs))


def test_encoder_checkpoint_round_trip(tmp_path):
    corpus, vocab = toy_corpus(10)
    enc = small_encoder(vocab_size=len(vocab), max_len=16, seed=8)
    path = str(tmp_path / "enc.ckpt")
    save_encoder(path, enc, vocab, {"pretrained": True})
    back, v2, meta = load_encoder(path)
    assert v2 == vocab and meta["pretrained"] is True
    assert back.config == enc.config
    ids = torch.tensor(corpus[0])
    assert torch.equal(encode(back, ids), encode(enc, ids))
