"""Synthetic KB whose surface forms carry signal the graph only partly exposes.

Entities fall into groups arranged on a cycle. Each entity has ``slots``
attribute words; inside a group every slot is a permutation of the same
``group_size`` values, so a (group, slot, value) triple names exactly one
entity. Relation ``r`` shifts the group by a fixed offset and keeps slot
``r % slots``: the object of ``(s, r)`` is the entity in group
``g(s) + shift_r`` whose slot word equals the subject's.

A low-dimensional ComplEx/RotatE model captures the cyclic group shift, so the
gold lands in the top few dozen candidates, but it cannot tell the group
members apart. The surface forms can: the gold shares the relation's slot word
with the subject. Entities of neighbouring groups may share that word too,
and only the Stage-1 order separates them from the gold.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List

import numpy as np

from .kb import KnowledgeBase, Triple, Vocabulary, save_kb

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticSpec:
    num_entities: int = 500
    num_relations: int = 20
    group_size: int = 20
    slots: int = 3
    num_facts: int = 6000
    valid_fraction: float = 0.05
    test_fraction: float = 0.05
    seed: int = 0


def _words(rng: np.random.Generator, n: int, taken: set, length: int = 4) -> List[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(list(_CONSONANTS if i % 2 == 0 else _VOWELS)) for i in range(length))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> KnowledgeBase:
    if spec.num_entities % spec.group_size:
        raise ValueError("num_entities must be a multiple of group_size")
    n_groups = spec.num_entities // spec.group_size
    if n_groups < 2:
        raise ValueError("need at least two groups")
    if spec.group_size ** spec.slots < spec.num_entities:
        raise ValueError("too few slot-word combinations for distinct surface forms")
    rng = np.random.default_rng(spec.seed)
    taken: set = set()
    slot_words = [_words(rng, spec.group_size, taken) for _ in range(spec.slots)]
    rel_words = _words(rng, spec.num_relations, taken, length=5)

    # groups are redrawn until their value tuples avoid every earlier group
    seen: set = set()
    blocks = []
    for _ in range(n_groups):
        while True:
            block = np.stack([rng.permutation(spec.group_size) for _ in range(spec.slots)], axis=1)
            rows = {tuple(v) for v in block}
            if not rows & seen:
                break
        seen |= rows
        blocks.append(block)
    # slot index = group * group_size + position; values[slot, a] is the slot-a value
    values = np.concatenate(blocks)
    by_value = {}
    for slot in range(spec.num_entities):
        for a in range(spec.slots):
            by_value[(slot // spec.group_size, a, int(values[slot, a]))] = slot

    entities, relations = Vocabulary(), Vocabulary()
    slot_to_id = {}
    for eid, slot in enumerate(rng.permutation(spec.num_entities)):
        slot = int(slot)
        surface = " ".join(slot_words[a][values[slot, a]] for a in range(spec.slots))
        slot_to_id[slot] = entities.add(f"E{eid:04d}", surface)
    for r in range(spec.num_relations):
        relations.add(f"R{r:02d}", f"{rel_words[r]} of")

    shifts = rng.integers(1, n_groups, size=spec.num_relations)
    pairs = rng.choice(spec.num_entities * spec.num_relations, size=spec.num_facts, replace=False)
    triples = []
    for p in pairs:
        s_slot, r = divmod(int(p), spec.num_relations)
        a = r % spec.slots
        target_group = (s_slot // spec.group_size + int(shifts[r])) % n_groups
        o_slot = by_value[(target_group, a, int(values[s_slot, a]))]
        triples.append(Triple(slot_to_id[s_slot], r, slot_to_id[o_slot]))

    n_valid = int(round(spec.valid_fraction * len(triples)))
    n_test = int(round(spec.test_fraction * len(triples)))
    kb = KnowledgeBase(entities, relations)
    kb.splits["test"] = triples[:n_test]
    kb.splits["valid"] = triples[n_test:n_test + n_valid]
    kb.splits["train"] = triples[n_test + n_valid:]
    return kb


def write_synthetic(directory: str, spec: SyntheticSpec = SyntheticSpec()) -> KnowledgeBase:
    kb = make_synthetic(spec)
    save_kb(kb, directory)
    return kb
