"""Flat ``key = value`` run configuration with typed defaults."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, get_type_hints

from .reranker import (DEFAULT_EPOCHS, DEFAULT_K, DEFAULT_LR, DEFAULT_MAX_ENTITY_TOKENS, DEFAULT_MAX_LEN,
                       DEFAULT_TOKEN_BUDGET)

DEFAULT_SWEEP_KS = (10, 20, 30, 40)


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass
class RunConfig:
    workdir: str = "run"
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    entity_names: Optional[str] = None
    relation_names: Optional[str] = None

    stage1_kind: str = "complex"
    stage1_dim: int = 32
    stage1_epochs: int = 100
    stage1_lr: float = 1e-3
    stage1_negatives: int = 32
    stage1_batch_size: int = 256
    stage1_regularization: float = 0.0
    stage1_gamma: float = 6.0
    stage1_seed: int = 0

    encoder_layers: int = 2
    encoder_hidden: int = 64
    encoder_heads: int = 4
    encoder_ff: int = 256
    encoder_max_len: int = DEFAULT_MAX_LEN
    encoder_seed: int = 0
    vocab_min_freq: int = 1

    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_mask_prob: float = 0.15
    pretrain_token_budget: int = DEFAULT_TOKEN_BUDGET
    pretrain_seed: int = 0

    stage2_k: int = DEFAULT_K
    stage2_max_entity_tokens: int = DEFAULT_MAX_ENTITY_TOKENS
    stage2_epochs: int = DEFAULT_EPOCHS
    stage2_lr: float = DEFAULT_LR
    stage2_token_budget: int = DEFAULT_TOKEN_BUDGET
    stage2_seed: int = 0
    stage2_ablation: str = "none"
    stage2_shuffle_seed: int = 0
    stage2_inject_gold: bool = False
    stage2_filter_train_candidates: bool = False
    stage2_max_train_queries: int = 0  # 0 = use every training query

    eval_filter_splits: Tuple[str, ...] = ("train", "valid", "test")
    eval_tie_policy: str = "optimistic"
    eval_outside_topk: str = "stage1"
    sweep_ks: Tuple[int, ...] = DEFAULT_SWEEP_KS

    def validate(self) -> "RunConfig":
        from .metrics import TiePolicy
        from .reranker import Ablation
        from .stage1 import ModelKind

        checks = [
            ("stage1_kind", lambda v: v in {m.value for m in ModelKind}),
            ("stage2_ablation", lambda v: v in {a.value for a in Ablation}),
            ("eval_tie_policy", lambda v: v in {t.value for t in TiePolicy}),
            ("eval_outside_topk", lambda v: v in ("stage1", "miss")),
            ("eval_filter_splits", lambda v: set(v) <= {"train", "valid", "test"}),
            ("stage1_dim", lambda v: v >= 1),
            ("stage2_k", lambda v: v >= 1),
            ("stage2_max_entity_tokens", lambda v: v >= 1),
            ("encoder_max_len", lambda v: v >= 1),
            ("sweep_ks", lambda v: len(v) > 0 and all(k >= 1 for k in v)),
        ]
        for name, ok in checks:
            if not ok(getattr(self, name)):
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}")
        if self.encoder_hidden % self.encoder_heads:
            raise ConfigError("encoder_hidden must be divisible by encoder_heads")
        return self

    def dataset_paths(self) -> Dict[str, Optional[str]]:
        return {"train": self.train_path, "valid": self.valid_path, "test": self.test_path}


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = get_type_hints(RunConfig)
_PATH_KEYS = ("workdir", "train_path", "valid_path", "test_path", "entity_names", "relation_names")


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == Optional[str]:
            return raw or None
        if typ == Tuple[str, ...]:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if typ == Tuple[int, ...]:
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")  # pragma: no cover


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def load_config(path: Optional[str] = None, overrides: Mapping[str, str] = ()) -> RunConfig:
    """Read ``path`` (relative paths resolve against its directory), then apply overrides."""
    values: Dict[str, object] = {}
    base = os.getcwd()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            values = parse_config_text(f.read(), path)
        base = os.path.dirname(os.path.abspath(path))
        for key in _PATH_KEYS:
            if values.get(key) and not os.path.isabs(values[key]):
                values[key] = os.path.join(base, values[key])
    for key, raw in dict(overrides).items():
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
