"""Train/test leakage analysis: exact image duplicates and caption overlap."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..encoders import split_words
from .imageio import md5_hex


@dataclass
class LeakageConfig:
    lexical_threshold: float = 0.8
    ngram: int = 3
    bins: int = 10


@dataclass
class LeakageReport:
    exact_duplicate_pairs: list = field(default_factory=list)
    lexical_pairs_over_threshold: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)
    lexical_max_density: list = field(default_factory=list)
    semantic_max_density: list | None = None
    n_train: int = 0
    n_test: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exact_duplicate_pairs"] = [list(p) for p in self.exact_duplicate_pairs]
        d["lexical_pairs_over_threshold"] = [list(p) for p in self.lexical_pairs_over_threshold]
        return d


def word_ngrams(text: str, n: int = 3) -> frozenset:
    words = split_words(text)
    if len(words) < n:
        return frozenset([tuple(words)]) if words else frozenset()
    return frozenset(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def leakage_check(train, test, train_pixels, test_pixels, cfg: LeakageConfig | None = None,
                  semantic=None) -> LeakageReport:
    """Compare every test record against every train record.

    ``*_pixels`` are decoded uint8 images aligned with the record lists.
    ``semantic``, when given, is a ``(n_test, n_train)`` cosine matrix from a
    text encoder; it only feeds the non-normative density histogram.
    """
    cfg = cfg or LeakageConfig()
    if not train or not test:
        raise ValueError("leakage_check needs nonempty train and test sets")
    train_md5: dict = {}
    for rec, px in zip(train, train_pixels):
        train_md5.setdefault(md5_hex(px), []).append(rec.id)
    exact = []
    for rec, px in zip(test, test_pixels):
        for tid in train_md5.get(md5_hex(px), []):
            exact.append((rec.id, tid))

    train_grams = [word_ngrams(r.detail_caption, cfg.ngram) for r in train]
    lexical, best = [], []
    for rec in test:
        g = word_ngrams(rec.detail_caption, cfg.ngram)
        scores = [jaccard(g, tg) for tg in train_grams]
        best.append(max(scores))
        for tr, s in zip(train, scores):
            if s >= cfg.lexical_threshold:
                lexical.append((rec.id, tr.id, round(s, 6)))

    edges = np.linspace(0.0, 1.0, cfg.bins + 1)
    report = LeakageReport(
        exact_duplicate_pairs=exact,
        lexical_pairs_over_threshold=lexical,
        thresholds={"lexical_jaccard": cfg.lexical_threshold, "ngram": cfg.ngram},
        lexical_max_density=np.histogram(best, bins=edges)[0].tolist(),
        n_train=len(train),
        n_test=len(test),
    )
    if semantic is not None:
        sem = np.clip(np.asarray(semantic).max(axis=1), 0.0, 1.0)
        report.semantic_max_density = np.histogram(sem, bins=edges)[0].tolist()
    return report
