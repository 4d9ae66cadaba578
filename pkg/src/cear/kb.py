"""Knowledge-base data model, file loading, query enumeration and the filter index."""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class KBFormatError(ValueError):
    """Raised for malformed dataset files."""


class Direction(str, enum.Enum):
    TAIL = "tail"  # <s, r, ?>
    HEAD = "head"  # <?, r, o>


class Triple(NamedTuple):
    s: int
    r: int
    o: int


class Query(NamedTuple):
    known: int
    r: int
    direction: Direction
    gold: int


def normalize_surface(text: str) -> str:
    return " ".join(text.lower().split())


class Vocabulary:
    """Dense id <-> string-id bijection with a surface form per entry."""

    def __init__(self) -> None:
        self._keys: List[str] = []
        self._index: Dict[str, int] = {}
        self._surfaces: List[str] = []

    def add(self, key: str, surface: str) -> int:
        if key in self._index:
            return self._index[key]
        surface = normalize_surface(surface)
        if not surface:
            raise KBFormatError(f"empty surface form for {key!r}")
        self._index[key] = len(self._keys)
        self._keys.append(key)
        self._surfaces.append(surface)
        return self._index[key]

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: object) -> bool:
        return key in self._index

    def id(self, key: str) -> int:
        return self._index[key]

    def key(self, idx: int) -> str:
        return self._keys[idx]

    def surface(self, idx: int) -> str:
        return self._surfaces[idx]

    @property
    def keys(self) -> List[str]:
        return list(self._keys)

    @property
    def surfaces(self) -> List[str]:
        return list(self._surfaces)


@dataclass
class KnowledgeBase:
    entities: Vocabulary
    relations: Vocabulary
    splits: Dict[str, List[Triple]] = field(default_factory=dict)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def triples(self, split: str) -> List[Triple]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits.get(split, [])

    def summary(self) -> Dict[str, int]:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            **{split: len(self.triples(split)) for split in SPLITS},
        }

    def format_summary(self, name: str = "KB") -> str:
        s = self.summary()
        header = f"{'Dataset':<12} {'Entities':>9} {'Relations':>9} {'Train':>9} {'Valid':>9} {'Test':>9}"
        row = (
            f"{name:<12} {s['entities']:>9,} {s['relations']:>9,} "
            f"{s['train']:>9,} {s['valid']:>9,} {s['test']:>9,}"
        )
        return header + "\n" + row

    def fingerprint(self) -> str:
        """Stable hash of the id assignment; used to match checkpoints to datasets."""
        import hashlib

        h = hashlib.sha256()
        for key in self.entities.keys:
            h.update(key.encode("utf-8") + b"\x00")
        h.update(b"\x01")
        for key in self.relations.keys:
            h.update(key.encode("utf-8") + b"\x00")
        return h.hexdigest()[:16]


def _read_tsv(path: str, n_fields: int) -> Iterable[Tuple[int, List[str]]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise KBFormatError(
                    f"{path}:{lineno}: expected {n_fields} tab-separated fields, got {len(parts)}"
                )
            yield lineno, parts


def _read_names(path: Optional[str]) -> Optional[Dict[str, Tuple[str, int]]]:
    if path is None:
        return None
    names: Dict[str, Tuple[str, int]] = {}
    for lineno, (key, surface) in _read_tsv(path, 2):
        if key in names:
            raise KBFormatError(f"{path}:{lineno}: duplicate id {key!r}")
        names[key] = (surface, lineno)
    return names


def load_kb(
    triples_paths: Mapping[str, Optional[str]],
    entity_names_path: Optional[str] = None,
    relation_names_path: Optional[str] = None,
) -> KnowledgeBase:
    """Load a KB from ``s<TAB>r<TAB>o`` triple files and optional name files.

    Only ids referenced by some triple enter the vocabulary. Ids are assigned
    in name-file order first, then in order of first appearance in the triple
    files. Without a name file the id string doubles as the surface form (the
    open-KB layout); with one, every referenced id must be named.
    """
    raw: Dict[str, List[Tuple[int, str, str, str]]] = {}
    for split, path in triples_paths.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        rows = []
        if path is not None:
            for lineno, (s, r, o) in _read_tsv(path, 3):
                rows.append((lineno, s, r, o))
        raw[split] = rows

    ent_names = _read_names(entity_names_path)
    rel_names = _read_names(relation_names_path)

    used_ents = {x for rows in raw.values() for _, s, _, o in rows for x in (s, o)}
    used_rels = {r for rows in raw.values() for _, _, r, _ in rows}

    entities, relations = Vocabulary(), Vocabulary()
    for vocab, names, used in ((entities, ent_names, used_ents), (relations, rel_names, used_rels)):
        if names is not None:
            for key, (surface, _) in names.items():
                if key in used:
                    vocab.add(key, surface)

    for split in SPLITS:
        path = triples_paths.get(split)
        for lineno, s, r, o in raw.get(split, []):
            for key, vocab, names, kind in (
                (s, entities, ent_names, "entity"),
                (r, relations, rel_names, "relation"),
                (o, entities, ent_names, "entity"),
            ):
                if key in vocab:
                    continue
                if names is not None:
                    raise KBFormatError(f"{path}:{lineno}: unknown {kind} id {key!r} (not in name file)")
                vocab.add(key, key)

    kb = KnowledgeBase(entities, relations)
    for split in SPLITS:
        kb.splits[split] = [
            Triple(entities.id(s), relations.id(r), entities.id(o)) for _, s, r, o in raw.get(split, [])
        ]
    logger.info("loaded KB: %s", kb.summary())
    return kb


def load_kb_dir(directory: str) -> KnowledgeBase:
    """Load ``train.txt``/``valid.txt``/``test.txt`` plus optional name files from a directory."""
    paths = {}
    for split in SPLITS:
        p = os.path.join(directory, f"{split}.txt")
        paths[split] = p if os.path.exists(p) else None
    ent = os.path.join(directory, "entity_names.txt")
    rel = os.path.join(directory, "relation_names.txt")
    return load_kb(
        paths,
        ent if os.path.exists(ent) else None,
        rel if os.path.exists(rel) else None,
    )


def save_kb(kb: KnowledgeBase, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for split in SPLITS:
        with open(os.path.join(directory, f"{split}.txt"), "w", encoding="utf-8", newline="\n") as f:
            for t in kb.triples(split):
                f.write(f"{kb.entities.key(t.s)}\t{kb.relations.key(t.r)}\t{kb.entities.key(t.o)}\n")
    for name, vocab in (("entity_names.txt", kb.entities), ("relation_names.txt", kb.relations)):
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as f:
            for idx in range(len(vocab)):
                f.write(f"{vocab.key(idx)}\t{vocab.surface(idx)}\n")


class FilterIndex:
    """Known-true completions per (known entity, relation, direction)."""

    def __init__(self, index: Dict[Tuple[int, int, Direction], FrozenSet[int]], splits: Sequence[str]):
        self._index = index
        self.splits = tuple(splits)

    def lookup(self, known: int, r: int, direction: Direction) -> FrozenSet[int]:
        return self._index.get((known, r, Direction(direction)), frozenset())

    def for_query(self, query: Query) -> FrozenSet[int]:
        return self.lookup(query.known, query.r, query.direction)

    def __len__(self) -> int:
        return len(self._index)


def build_filter_index(kb: KnowledgeBase, splits: Sequence[str] = SPLITS) -> FilterIndex:
    acc: Dict[Tuple[int, int, Direction], set] = {}
    for split in splits:
        for s, r, o in kb.triples(split):
            acc.setdefault((s, r, Direction.TAIL), set()).add(o)
            acc.setdefault((o, r, Direction.HEAD), set()).add(s)
    return FilterIndex({key: frozenset(v) for key, v in acc.items()}, splits)


def enumerate_queries(kb: KnowledgeBase, split: str) -> List[Query]:
    """One TAIL then one HEAD query per triple, in file order."""
    queries = []
    for s, r, o in kb.triples(split):
        queries.append(Query(s, r, Direction.TAIL, o))
        queries.append(Query(o, r, Direction.HEAD, s))
    return queries
