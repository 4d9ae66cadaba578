import cmath
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cear.checkpoint import CheckpointError
from cear.kb import Direction, KnowledgeBase, Query, Triple, Vocabulary, build_filter_index, enumerate_queries
from cear.stage1 import (CandidateSet, ModelKind, Stage1Config, Stage1Model, TrainingDivergedError, complex_score,
                         export_candidates, import_candidates, load_stage1, rotate_score, save_stage1, score_queries,
                         stage1_loss, topk_candidates, topk_candidates_batch, train_stage1)


def loop_complex(e_s, w_r, e_o):
    total = 0.0
    for a, b, c in zip(e_s, w_r, e_o):
        total += (complex(a) * complex(b) * complex(c).conjugate()).real
    return total


def loop_rotate(e_s, phase, e_o, gamma):
    dist = 0.0
    for a, p, c in zip(e_s, phase, e_o):
        dist += abs(complex(a) * cmath.exp(1j * float(p)) - complex(c))
    return gamma - dist


def rand_complex(rng, d):
    return rng.normal(size=d) + 1j * rng.normal(size=d)


def central_diff(fn, params, eps=1e-6):
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    return ((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12)).item()


# ---- scoring kernels -------------------------------------------------------

def test_complex_trivial_cases():
    assert complex_score(np.zeros(3, complex), np.zeros(3, complex), np.zeros(3, complex)) == 0.0
    one = np.array([1 + 0j])
    assert complex_score(one, one, one) == 1.0


def test_rotate_trivial_cases():
    e = np.array([0.3 - 0.2j, 1.5 + 0.1j])
    assert rotate_score(e, np.zeros(2), e, 6.0) == 6.0
    assert rotate_score(np.array([1 + 0j]), np.array([math.pi]), np.array([-1 + 0j]), 6.0) == 6.0


def test_kernels_match_scalar_loops():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        e_s, w_r, e_o = rand_complex(rng, d), rand_complex(rng, d), rand_complex(rng, d)
        phase = rng.uniform(0, 2 * math.pi, size=d)
        want = loop_complex(e_s, w_r, e_o)
        assert complex_score(e_s, w_r, e_o) == pytest.approx(want, rel=1e-10, abs=1e-12)
        want = loop_rotate(e_s, phase, e_o, 4.0)
        assert rotate_score(e_s, phase, e_o, 4.0) == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_dimension_mismatch_and_gamma():
    with pytest.raises(ValueError):
        complex_score(np.ones(2, complex), np.ones(3, complex), np.ones(2, complex))
    with pytest.raises(ValueError):
        rotate_score(np.ones(2, complex), np.zeros(3), np.ones(2, complex), 1.0)
    with pytest.raises(ValueError):
        rotate_score(np.ones(2, complex), np.zeros(2), np.ones(2, complex), 0.0)


def test_torch_inputs_return_tensors():
    x = torch.ones(2, 3, dtype=torch.complex128)
    out = complex_score(x, x, x)
    assert isinstance(out, torch.Tensor) and out.shape == (2,)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_complex_linear_in_subject(seed, alpha):
    rng = np.random.default_rng(seed)
    e_s, w_r, e_o = rand_complex(rng, 4), rand_complex(rng, 4), rand_complex(rng, 4)
    base = complex_score(e_s, w_r, e_o)
    assert complex_score(alpha * e_s, w_r, e_o) == pytest.approx(alpha * base, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_rotate_bounded_by_gamma(seed):
    rng = np.random.default_rng(seed)
    e_s, phase = rand_complex(rng, 5), rng.uniform(0, 2 * math.pi, 5)
    e_o = rand_complex(rng, 5)
    assert rotate_score(e_s, phase, e_o, 3.0) < 3.0
    assert rotate_score(e_s, phase, e_s * np.exp(1j * phase), 3.0) == pytest.approx(3.0, abs=1e-12)


# ---- gradients -------------------------------------------------------------

@pytest.mark.parametrize("kind", ["complex", "rotate"])
def test_scoring_gradients_match_finite_differences(kind):
    g = torch.Generator().manual_seed(3)
    parts = [torch.randn(4, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(6)]
    es_re, es_im, r_a, r_b, eo_re, eo_im = parts

    def score():
        e_s, e_o = torch.complex(es_re, es_im), torch.complex(eo_re, eo_im)
        if kind == "complex":
            return complex_score(e_s, torch.complex(r_a, r_b), e_o)
        return rotate_score(e_s, r_a, e_o, 2.0)

    params = parts if kind == "complex" else [es_re, es_im, r_a, eo_re, eo_im]
    analytic = torch.autograd.grad(score(), params)
    with torch.no_grad():
        numeric = central_diff(score, params)
    assert rel_err(analytic, numeric) < 1e-4


@pytest.mark.parametrize("kind,reg", [("complex", 0.0), ("complex", 0.05), ("rotate", 0.0)])
def test_training_loss_gradients_match_finite_differences(kind, reg):
    model = Stage1Model(kind, 5, 2, 3, gamma=2.0, seed=1)
    triples = torch.tensor([[0, 0, 1], [2, 1, 3], [4, 0, 0]])
    g = torch.Generator().manual_seed(0)
    neg_t, neg_h = torch.randint(5, (3, 4), generator=g), torch.randint(5, (3, 4), generator=g)
    params = list(model.parameters())

    def loss():
        return stage1_loss(model, triples, neg_t, neg_h, reg)

    analytic = torch.autograd.grad(loss(), params)
    with torch.no_grad():
        numeric = central_diff(loss, params)
    assert rel_err(analytic, numeric) < 1e-4


# ---- training --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["complex", "rotate"])
def test_toy_kb_memorized(toy_kb, kind):
    model = train_stage1(toy_kb, Stage1Config(kind=kind, dim=4, epochs=50, lr=0.1, negatives=8, seed=0))
    queries = enumerate_queries(toy_kb, "train")
    scores = score_queries(model, queries)
    for q, row in zip(queries, scores):
        assert int(np.argmax(row)) == q.gold


def test_epochs_zero_returns_initialization(toy_kb):
    trained = train_stage1(toy_kb, Stage1Config(dim=4, epochs=0, seed=7))
    fresh = Stage1Model("complex", 3, 2, 4, seed=7)
    for a, b in zip(trained.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


@pytest.mark.parametrize("kind", ["complex", "rotate"])
def test_training_is_deterministic(toy_kb, kind):
    cfg = Stage1Config(kind=kind, dim=4, epochs=5, lr=0.05, seed=11)
    a, b = train_stage1(toy_kb, cfg), train_stage1(toy_kb, cfg)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_rotate_relations_stay_unit_modulus(toy_kb):
    model = train_stage1(toy_kb, Stage1Config(kind="rotate", dim=4, epochs=20, lr=0.5, seed=0))
    mod = model.relation(slice(None)).abs()
    assert torch.all((mod - 1).abs() < 1e-9)


def test_divergence_aborts(toy_kb):
    with pytest.raises(TrainingDivergedError):
        train_stage1(toy_kb, Stage1Config(dim=4, epochs=3, lr=float("inf"), seed=0))


def test_loss_history_recorded(toy_kb):
    hist = []
    train_stage1(toy_kb, Stage1Config(dim=4, epochs=30, lr=0.05, seed=0), hist)
    assert len(hist) == 30
    assert hist[-1] < hist[0]


# ---- top-k -----------------------------------------------------------------

def random_kb(rng, n_ent, n_rel, n_facts):
    kb = KnowledgeBase(Vocabulary(), Vocabulary())
    for e in range(n_ent):
        kb.entities.add(f"e{e}", f"e{e}")
    for r in range(n_rel):
        kb.relations.add(f"r{r}", f"r{r}")
    facts = sorted({(int(rng.integers(n_ent)), int(rng.integers(n_rel)), int(rng.integers(n_ent)))
                    for _ in range(n_facts)})
    kb.splits = {"train": [Triple(*f) for f in facts], "valid": [], "test": []}
    return kb


def brute_topk(model, q, k, exclude=()):
    rows = []
    for e in range(model.num_entities):
        if e in exclude:
            continue
        s, o = (q.known, e) if q.direction is Direction.TAIL else (e, q.known)
        rows.append((-model.score_triples(torch.tensor(s), torch.tensor(q.r), torch.tensor(o)).item(), e))
    return [e for _, e in sorted(rows)[:k]]


@pytest.mark.parametrize("seed", range(5))
def test_topk_matches_brute_force_sort(seed):
    rng = np.random.default_rng(seed)
    n_ent = int(rng.integers(3, 101))
    kb = random_kb(rng, n_ent, 3, 60)
    model = Stage1Model("complex", n_ent, 3, 4, seed=seed)
    # duplicate an entity's embedding to force exact ties
    with torch.no_grad():
        model.ent_re[1] = model.ent_re[0]
        model.ent_im[1] = model.ent_im[0]
    idx = build_filter_index(kb)
    for q in enumerate_queries(kb, "train")[:30]:
        for k in (1, 2, 10, n_ent + 5):
            assert topk_candidates(model, q, k).entity_ids == brute_topk(model, q, k)
            excl = idx.for_query(q) - {q.gold}
            got = topk_candidates(model, q, k, idx)
            assert got.entity_ids == brute_topk(model, q, k, excl)
            assert got.scores == sorted(got.scores, reverse=True)
            assert len(set(got.entity_ids)) == len(got.entity_ids)


def test_topk_ties_break_by_ascending_id():
    model = Stage1Model("complex", 4, 1, 2, seed=0)
    with torch.no_grad():
        model.ent_re.zero_()
        model.ent_im.zero_()
    cs = topk_candidates(model, Query(0, 0, Direction.TAIL, 2), 3)
    assert cs.entity_ids == [0, 1, 2]


def test_topk_rejects_nonpositive_k(toy_kb):
    model = Stage1Model("complex", 3, 2, 2)
    with pytest.raises(ValueError):
        topk_candidates(model, Query(0, 0, Direction.TAIL, 1), 0)


# ---- candidate files and checkpoints ----------------------------------------

def test_candidate_file_round_trip(toy_kb, tmp_path):
    model = train_stage1(toy_kb, Stage1Config(dim=4, epochs=5, lr=0.05))
    sets = topk_candidates_batch(model, enumerate_queries(toy_kb, "train"), 2, build_filter_index(toy_kb))
    path = str(tmp_path / "cands.jsonl")
    export_candidates(path, sets, toy_kb)
    back = import_candidates(path, toy_kb)
    assert back == sets


def test_import_single_record(toy_kb, tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"known": "a", "relation": "r1", "direction": "tail", "gold": "b", '
                    '"candidates": ["b", "c", "a"], "scores": [3, 2, 1]}\n')
    (cs,) = import_candidates(str(path), toy_kb)
    assert len(cs) == 3
    assert cs.entity_ids == [toy_kb.entities.id(x) for x in "bca"]


@pytest.mark.parametrize("record,msg", [
    ('{"known": "a", "relation": "r1", "direction": "tail", "gold": "b", "candidates": ["zz"], "scores": [1]}',
     "unknown entity"),
    ('{"known": "a", "relation": "r1", "direction": "tail", "gold": "b", "candidates": ["b", "c"], "scores": [1]}',
     "scores"),
])
def test_import_errors(toy_kb, tmp_path, record, msg):
    path = tmp_path / "c.jsonl"
    path.write_text(record + "\n")
    with pytest.raises(ValueError, match=msg) as info:
        import_candidates(str(path), toy_kb)
    assert "c.jsonl:1" in str(info.value)


@pytest.mark.parametrize("kind", ["complex", "rotate"])
def test_checkpoint_round_trip_bit_identical(toy_kb, tmp_path, kind):
    model = train_stage1(toy_kb, Stage1Config(kind=kind, dim=4, epochs=3, lr=0.05))
    path = str(tmp_path / "s1.ckpt")
    save_stage1(path, model, toy_kb)
    back = load_stage1(path, toy_kb)
    qs = enumerate_queries(toy_kb, "train")
    assert np.array_equal(score_queries(model, qs), score_queries(back, qs))
    save_stage1(str(tmp_path / "again.ckpt"), back, toy_kb)
    assert open(path, "rb").read() == open(tmp_path / "again.ckpt", "rb").read()


def test_checkpoint_vocabulary_mismatch(toy_kb, tmp_path):
    model = Stage1Model("complex", 3, 2, 2)
    path = str(tmp_path / "s1.ckpt")
    save_stage1(path, model, toy_kb)
    other = KnowledgeBase(Vocabulary(), Vocabulary())
    for key in "xyz":
        other.entities.add(key, key)
    other.relations.add("q", "q")
    other.relations.add("w", "w")
    with pytest.raises(CheckpointError):
        load_stage1(path, other)


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_stage1(str(path))
