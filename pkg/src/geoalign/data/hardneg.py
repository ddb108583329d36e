"""Hard-negative phrases by minimal perturbation of a templated region phrase.

Phrases follow ``"{color} {category} in the {location}"``.  Three edit kinds
are cycled: attribute (color swap), orientation (left/right, else
upper/lower, mirrored) and category (swap to a confusable category).
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .records import HardNegative, RegionAnnotation
from .synth import CATEGORIES, COLORS, LOCATIONS

KINDS = ("attribute", "orientation", "category")

CONFUSABLE = {
    "tank": ("pool", "tree-cluster", "building"),
    "pool": ("tank", "court", "building"),
    "court": ("pool", "road", "building"),
    "building": ("vehicle", "court", "pool"),
    "plane": ("vehicle", "tree-cluster", "road"),
    "road": ("court", "vehicle", "plane"),
    "tree-cluster": ("tank", "plane", "building"),
    "vehicle": ("building", "plane", "road"),
}


class PhraseGrammarError(ValueError):
    pass


@dataclass
class Lexicons:
    colors: tuple = tuple(COLORS)
    categories: tuple = CATEGORIES
    locations: tuple = LOCATIONS
    confusable: dict = field(default_factory=lambda: dict(CONFUSABLE))


def parse_phrase(phrase: str, lex: Lexicons) -> tuple[str, str, str]:
    alt = lambda words: "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))
    m = re.fullmatch(
        rf"({alt(lex.colors)}) ({alt(lex.categories)}) in the ({alt(lex.locations)})", phrase.strip()
    )
    if m is None:
        raise PhraseGrammarError(f"phrase does not match the template grammar: {phrase!r}")
    return m.group(1), m.group(2), m.group(3)


_FLIP_H = {"left": "right", "right": "left"}
_FLIP_V = {"upper": "lower", "lower": "upper"}


def invert_location(location: str) -> str | None:
    words = location.split()
    if any(w in _FLIP_H for w in words):
        return " ".join(_FLIP_H.get(w, w) for w in words)
    if any(w in _FLIP_V for w in words):
        return " ".join(_FLIP_V.get(w, w) for w in words)
    return None


def _cyclic_after(items, current) -> list:
    items = list(items)
    if current not in items:
        return items
    i = items.index(current)
    return items[i + 1 :] + items[:i]


def candidates(phrase: str, lex: Lexicons, rng) -> dict:
    """Per-kind ordered candidate phrases.

    Attribute and orientation lists start with a canonical candidate (next
    color in the lexicon, mirrored location) and ``rng`` orders the rest.
    Category candidates are the confusable categories in ``rng`` order,
    followed by the remaining categories, also shuffled.
    """
    color, category, location = parse_phrase(phrase, lex)

    def fmt(c, k, l):
        return f"{c} {k} in the {l}"

    def shuffled(items):
        return [items[i] for i in rng.permutation(len(items))] if items else []

    def settle(items):
        return items[:1] + shuffled(items[1:])

    attr = [fmt(c, category, location) for c in _cyclic_after(lex.colors, color)]
    flipped = invert_location(location)
    orient = [fmt(color, category, flipped)] if flipped else []
    conf = [c for c in lex.confusable.get(category, ()) if c != category]
    rest = [c for c in _cyclic_after(lex.categories, category) if c not in conf and c != category]
    cat = [fmt(color, k, location) for k in shuffled(conf) + shuffled(rest)]
    return {"attribute": settle(attr), "orientation": orient, "category": cat}


def synth_hard_negatives(ann: RegionAnnotation, q_minus_1: int = 3, seed: int = 0,
                         lex: Lexicons | None = None) -> RegionAnnotation:
    """Return a copy of ``ann`` carrying ``q_minus_1`` distinct hard negatives."""
    lex = lex or Lexicons()
    rng = np.random.default_rng(seed)
    pools = candidates(ann.phrase, lex, rng)
    cursor = {k: 0 for k in KINDS}
    chosen, seen = [], {ann.phrase}
    turn = 0
    while len(chosen) < q_minus_1:
        progressed = False
        for _ in range(len(KINDS)):
            kind = KINDS[turn % len(KINDS)]
            turn += 1
            pool = pools[kind]
            while cursor[kind] < len(pool) and pool[cursor[kind]] in seen:
                cursor[kind] += 1
            if cursor[kind] < len(pool):
                text = pool[cursor[kind]]
                cursor[kind] += 1
                seen.add(text)
                chosen.append(HardNegative(text, kind))
                progressed = True
                break
        if not progressed:
            raise ValueError(f"cannot build {q_minus_1} distinct negatives for {ann.phrase!r}")
    return RegionAnnotation(bbox=ann.bbox, phrase=ann.phrase, hard_negatives=chosen)


def negative_seed(seed: int, record_id: str, region_index: int) -> int:
    key = zlib.crc32(record_id.encode("utf-8"))
    return int(np.random.SeedSequence([seed, key, region_index]).generate_state(1)[0])


def add_hard_negatives(records, q: int = 4, seed: int = 0, lex: Lexicons | None = None):
    """New records with Q-1 negatives attached to every region."""
    out = []
    for rec in records:
        regions = [
            synth_hard_negatives(r, q - 1, negative_seed(seed, rec.id, j), lex)
            for j, r in enumerate(rec.regions)
        ]
        out.append(type(rec)(rec.id, rec.image, rec.brief_caption, rec.detail_caption, regions, rec.split))
    return out
