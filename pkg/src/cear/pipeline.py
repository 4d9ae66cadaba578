"""Pipeline steps shared by the CLI: each reads and writes artifacts under ``cfg.workdir``."""

from __future__ import annotations

import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .encoder import (INV, EncoderConfig, MlmConfig, TransformerEncoder, Vocab, build_vocab, load_encoder,
                      mlm_pretrain, save_encoder, tokenize)
from .kb import (SPLITS, Direction, KnowledgeBase, Query, build_filter_index, enumerate_queries, load_kb)
from .metrics import (ConfusionCounts, EvalReport, TiePolicy, compute_metrics, confusion_matrix,
                      degradation_rate, filtered_rank, format_table, rank_histogram, two_tier_rank)
from .reranker import (Ablation, RerankerModel, Stage2Config, load_reranker, make_examples, order_by_scores,
                       predictions, save_reranker, train_stage2)
from .stage1 import (CandidateSet, Stage1Config, candidates_from_scores, export_candidates, import_candidates,
                     load_stage1, save_stage1, score_queries, train_stage1)

logger = logging.getLogger(__name__)


class MissingArtifactError(RuntimeError):
    """A pipeline step ran before the step producing its input."""


def _path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.workdir, name)


def _require(path: str, step: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found; run `cear {step}` first")
    return path


def stage1_path(cfg):
    return _path(cfg, "stage1.ckpt")


def candidates_path(cfg, split):
    return _path(cfg, f"candidates_{split}.jsonl")


def encoder_path(cfg):
    return _path(cfg, "encoder.ckpt")


def reranker_path(cfg, ablation: Optional[str] = None, k: Optional[int] = None):
    ablation = ablation or cfg.stage2_ablation
    suffix = "" if k is None else f"_k{k}"
    return _path(cfg, f"reranker_{ablation}{suffix}.ckpt")


def load_dataset(cfg: RunConfig) -> KnowledgeBase:
    paths = cfg.dataset_paths()
    if paths["train"] is None:
        raise ConfigError("train_path is not set")
    for key, p in [*paths.items(), ("entity_names", cfg.entity_names), ("relation_names", cfg.relation_names)]:
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"{key}: file not found: {p}")
    return load_kb(paths, cfg.entity_names, cfg.relation_names)


def stage1_config(cfg: RunConfig) -> Stage1Config:
    return Stage1Config(kind=cfg.stage1_kind, dim=cfg.stage1_dim, epochs=cfg.stage1_epochs, lr=cfg.stage1_lr,
                        negatives=cfg.stage1_negatives, batch_size=cfg.stage1_batch_size,
                        regularization=cfg.stage1_regularization, gamma=cfg.stage1_gamma, seed=cfg.stage1_seed)


def run_train_stage1(cfg: RunConfig, kb: Optional[KnowledgeBase] = None) -> List[float]:
    kb = kb or load_dataset(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    history: List[float] = []
    model = train_stage1(kb, stage1_config(cfg), history)
    for epoch, loss in enumerate(history, start=1):
        print(f"epoch {epoch:4d}  loss {loss:.6f}")
    save_stage1(stage1_path(cfg), model, kb)
    return history


def run_candidates(cfg: RunConfig, split: str, kb: Optional[KnowledgeBase] = None,
                   k: Optional[int] = None) -> List[CandidateSet]:
    """Top-k candidates for every query of ``split``.

    Evaluation splits are filtered with ``eval_filter_splits``; the train split
    is left unfiltered unless ``stage2_filter_train_candidates`` is set.
    """
    kb = kb or load_dataset(cfg)
    model = load_stage1(_require(stage1_path(cfg), "train-stage1"), kb)
    k = k or cfg.stage2_k
    filt = None
    if split != "train" or cfg.stage2_filter_train_candidates:
        filt = build_filter_index(kb, cfg.eval_filter_splits)
    queries = enumerate_queries(kb, split)
    sets = []
    for start in range(0, len(queries), 1024):
        part = queries[start:start + 1024]
        scores = score_queries(model, part)
        sets += [candidates_from_scores(q, row, k, filt) for q, row in zip(part, scores)]
    export_candidates(candidates_path(cfg, split), sets, kb)
    return sets


def verbalized_corpus(kb: KnowledgeBase, vocab: Vocab, max_entity_tokens: int) -> List[List[int]]:
    """Pretraining sentences: each training fact in both directions, then every surface form."""
    ent, rel = kb.entities, kb.relations

    def toks(text):
        return tokenize(text, vocab, max_entity_tokens)

    corpus = []
    for s, r, o in kb.triples("train"):
        S, R, O = toks(ent.surface(s)), toks(rel.surface(r)), toks(ent.surface(o))
        corpus.append([vocab.cls_id, *S, vocab.spc_id, *R, vocab.sep_id, *O])
        corpus.append([vocab.cls_id, *O, vocab.spc_id, vocab[INV], *R, vocab.sep_id, *S])
    for surface in ent.surfaces + rel.surfaces:
        corpus.append([vocab.cls_id, *toks(surface)])
    return corpus


def fresh_encoder(cfg: RunConfig, vocab: Vocab) -> TransformerEncoder:
    return TransformerEncoder(EncoderConfig(len(vocab), hidden=cfg.encoder_hidden, layers=cfg.encoder_layers,
                                            heads=cfg.encoder_heads, ff=cfg.encoder_ff,
                                            max_len=cfg.encoder_max_len, seed=cfg.encoder_seed))


def run_pretrain(cfg: RunConfig, kb: Optional[KnowledgeBase] = None) -> List[float]:
    kb = kb or load_dataset(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    vocab = build_vocab(kb, cfg.vocab_min_freq, extra_tokens=[INV])
    vocab.save(_path(cfg, "vocab.txt"))
    encoder = fresh_encoder(cfg, vocab)
    history: List[float] = []
    corpus = verbalized_corpus(kb, vocab, cfg.stage2_max_entity_tokens)
    mlm_pretrain(encoder, corpus, vocab, MlmConfig(cfg.pretrain_mask_prob, cfg.pretrain_epochs, cfg.pretrain_lr,
                                                   cfg.pretrain_token_budget, cfg.pretrain_seed), history)
    for epoch, loss in enumerate(history):
        print(f"epoch {epoch:4d}  mlm loss {loss:.4f}" + ("  (before training)" if epoch == 0 else ""))
    save_encoder(encoder_path(cfg), encoder, vocab, {"pretrain_epochs": cfg.pretrain_epochs})
    return history


def _subsample(sets: Sequence[CandidateSet], limit: int, seed: int) -> List[CandidateSet]:
    if limit <= 0 or limit >= len(sets):
        return list(sets)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(sets), size=limit, replace=False))
    return [sets[i] for i in keep]


def build_reranker(cfg: RunConfig, kb: KnowledgeBase, k: Optional[int] = None,
                   ablation: Optional[str] = None) -> RerankerModel:
    ablation = Ablation(ablation or cfg.stage2_ablation)
    if ablation is Ablation.RANDOM_INIT:
        vocab = build_vocab(kb, cfg.vocab_min_freq, extra_tokens=[INV])
        encoder = fresh_encoder(cfg, vocab)
    else:
        encoder, vocab, _ = load_encoder(_require(encoder_path(cfg), "pretrain-lm"))
    return RerankerModel(encoder, vocab, k or cfg.stage2_k, cfg.stage2_max_entity_tokens, cfg.encoder_max_len,
                         ablation, cfg.stage2_shuffle_seed, cfg.stage2_seed)


def run_train_stage2(cfg: RunConfig, kb: Optional[KnowledgeBase] = None, k: Optional[int] = None,
                     ablation: Optional[str] = None):
    kb = kb or load_dataset(cfg)
    train_sets = import_candidates(_require(candidates_path(cfg, "train"), "candidates --split train"), kb)
    valid_file = candidates_path(cfg, "valid")
    valid_sets = import_candidates(valid_file, kb) if os.path.exists(valid_file) else None
    train_sets = _subsample(train_sets, cfg.stage2_max_train_queries, cfg.stage2_seed)
    model = build_reranker(cfg, kb, k, ablation)
    result = train_stage2(model, kb, train_sets,
                          Stage2Config(cfg.stage2_epochs, cfg.stage2_lr, cfg.stage2_token_budget, cfg.stage2_seed,
                                       cfg.stage2_inject_gold),
                          valid_sets, build_filter_index(kb, ["train"]))
    print(f"initial loss {result.initial_loss:.4f}")
    for epoch, loss in enumerate(result.epoch_losses, start=1):
        line = f"epoch {epoch:3d}  loss {loss:.4f}"
        if result.valid_hits1:
            line += f"  valid H1 {result.valid_hits1[epoch - 1]:.2f}"
        print(line)
    if result.valid_hits1:
        print(f"kept epoch {result.best_epoch}")
    save_reranker(reranker_path(cfg, model.ablation.value, k), model, kb,
                  {"initial_loss": result.initial_loss, "epoch_losses": result.epoch_losses,
                   "valid_hits1": result.valid_hits1, "best_epoch": result.best_epoch})
    return result


def _json_rank(rank: float):
    """Ranks for JSON output; a miss (infinite rank) becomes null."""
    return None if math.isinf(rank) else rank


def _report_dict(rep: EvalReport) -> dict:
    return rep.to_dict()


def evaluate(cfg: RunConfig, system: str, split: str, kb: Optional[KnowledgeBase] = None,
             k: Optional[int] = None, ablation: Optional[str] = None, write: bool = True) -> dict:
    """Evaluate Stage-1 alone or Stage-1 + reranker on ``split``; returns the report dict."""
    if system not in ("stage1", "cear"):
        raise ConfigError(f"unknown system {system!r}")
    kb = kb or load_dataset(cfg)
    stage1 = load_stage1(_require(stage1_path(cfg), "train-stage1"), kb)
    filt = build_filter_index(kb, cfg.eval_filter_splits)
    tie = TiePolicy(cfg.eval_tie_policy)
    queries = enumerate_queries(kb, split)
    if not queries:
        raise ConfigError(f"split {split!r} has no triples")
    s1_scores = score_queries(stage1, queries)
    s1_ranks = [filtered_rank(row, q.gold, filt.for_query(q), tie) for q, row in zip(queries, s1_scores)]
    directions = [q.direction for q in queries]
    s1_report = compute_metrics(s1_ranks, directions)
    report = {"system": system, "split": split}
    if system == "stage1":
        report.update(_report_dict(s1_report))
        name = "stage1"
    else:
        ablation = Ablation(ablation or cfg.stage2_ablation)
        model, meta = load_reranker(_require(reranker_path(cfg, ablation.value, k), "train-stage2"), kb)
        k_eval = k or model.k
        cand_file = _require(candidates_path(cfg, split), f"candidates --split {split}")
        sets = import_candidates(cand_file, kb)
        if [c.query for c in sets] != queries:
            raise MissingArtifactError(f"{cand_file} does not match the {split} queries; regenerate it")
        sets = [CandidateSet(c.query, c.entity_ids[:k_eval], c.scores[:k_eval]) for c in sets]
        examples = make_examples(model, kb, sets)
        scores = predictions(model, examples, cfg.stage2_token_budget)
        ranks, s1_top, s2_top, pred_s1_rank, records = [], [], [], [], []
        for q, ex, sc, cs, row, s1_rank in zip(queries, examples, scores, sets, s1_scores, s1_ranks):
            order = order_by_scores(sc, ex.stage1_ranks)
            ranks.append(two_tier_rank(ex.candidate_ids, list(sc), row, q.gold, filt.for_query(q), tie,
                                       cfg.eval_outside_topk))
            s1_top.append(cs.entity_ids[0])
            s2_top.append(ex.candidate_ids[order[0]])
            pred_s1_rank.append(ex.stage1_ranks[order[0]])
            records.append({
                "known": kb.entities.key(q.known), "relation": kb.relations.key(q.r),
                "direction": Direction(q.direction).value, "gold": kb.entities.key(q.gold),
                "candidates": [kb.entities.key(ex.candidate_ids[j]) for j in order],
                "scores": [cs.scores[ex.stage1_ranks[j] - 1] for j in order],
                "stage2_scores": [float(sc[j]) for j in order],
                "stage1_rank_of_predicted": ex.stage1_ranks[order[0]],
                "rank": _json_rank(ranks[-1]),
                "stage1_filtered_rank": _json_rank(s1_rank),
            })
        golds = [q.gold for q in queries]
        counts = confusion_matrix(s1_top, s2_top, golds)
        case01 = [r for a, b, g, r in zip(s1_top, s2_top, golds, pred_s1_rank) if a != g and b == g]
        cear_report = compute_metrics(ranks, directions)
        report.update(_report_dict(cear_report))
        report.update({
            "ablation": ablation.value,
            "k": k_eval,
            "confusion": counts.to_dict(),
            "degradation_rate": degradation_rate(counts),
            "histogram": rank_histogram(case01, k_eval),
            "stage1": _report_dict(s1_report),
        })
        name = f"cear-{ablation.value}" + (f"_k{k}" if k else "")
        if write:
            with open(_path(cfg, f"reranked_{name}_{split}.jsonl"), "w", encoding="utf-8", newline="\n") as f:
                for rec in records:
                    f.write(json.dumps(rec) + "\n")
    if write:
        with open(_path(cfg, f"report_{name}_{split}.json"), "w", encoding="utf-8", newline="\n") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(_path(cfg, f"report_{name}_{split}.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(format_report(report) + "\n")
    return report


def _as_eval_report(d: dict) -> EvalReport:
    return EvalReport(d["mrr"], {int(n): v for n, v in d["hits"].items()}, d["n_queries"])


def format_report(report: dict) -> str:
    rows = {}
    if report["system"] == "cear":
        rows["Stage-1"] = _as_eval_report(report["stage1"])
        rows[f"CEAR ({report['ablation']})"] = _as_eval_report(report)
    else:
        rows["Stage-1"] = _as_eval_report(report)
    lines = [f"split: {report['split']}", format_table(rows, (1, 10, 50))]
    if "head" in report and "tail" in report:
        lines.append("")
        lines.append("H1 by direction:  head {:.1f}  tail {:.1f}".format(
            report["head"]["hits"]["1"], report["tail"]["hits"]["1"]))
    if "confusion" in report:
        c = report["confusion"]
        lines.append("")
        lines.append(f"{'':<8} {'00':>7} {'01':>7} {'10':>7} {'11':>7}")
        lines.append(f"{'queries':<8} {c['00']:>7} {c['01']:>7} {c['10']:>7} {c['11']:>7}")
        lines.append(f"degraded: {report['degradation_rate']:.2f}%")
        lines.append("")
        lines.append("Stage-1 rank of the CEAR prediction (case 01):")
        for rank, count in enumerate(report["histogram"], start=1):
            if count:
                lines.append(f"  {rank:>3}  {count}")
    return "\n".join(lines)


def run_sweep(cfg: RunConfig, split: str = "test", kb: Optional[KnowledgeBase] = None,
              ks: Optional[Sequence[int]] = None) -> Dict[int, float]:
    """Train and evaluate one reranker per k; returns {k: H1}."""
    kb = kb or load_dataset(cfg)
    ks = list(ks or cfg.sweep_ks)
    out = {}
    for k in ks:
        run_train_stage2(cfg, kb, k=k)
        out[k] = evaluate(cfg, "cear", split, kb, k=k)["hits"]["1"]
    header = "k      " + "".join(f"{k:>8}" for k in ks)
    row = "H@1    " + "".join(f"{out[k]:>8.1f}" for k in ks)
    table = header + "\n" + row
    print(table)
    with open(_path(cfg, f"sweep_k_{split}.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(table + "\n")
    with open(_path(cfg, f"sweep_k_{split}.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump({str(k): v for k, v in out.items()}, f, indent=2)
        f.write("\n")
    return out
