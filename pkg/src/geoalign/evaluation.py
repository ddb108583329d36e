"""Retrieval, zero-shot region classification, hard-negative ranking and
phrase heatmaps.

Rankings break ties by gallery / class index: an item ranks ahead of the
true match if it scores strictly higher, or scores equal and has a lower
index.  Hard-negative ranking instead counts any tie as a failure.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .data.hardneg import Lexicons, parse_phrase
from .data.imageio import write_pgm
from .encoders import encode_texts, vision_forward_batch
from .regions import DEFAULT_BINS, DEFAULT_SAMPLES, crop_weights, region_embed, roi_align_batch

PROMPT = "a {}"


@dataclass
class RetrievalResult:
    direction: str
    recall_at: dict
    n_queries: int

    def to_dict(self) -> dict:
        return {"direction": self.direction, "recall_at": {str(k): v for k, v in self.recall_at.items()},
                "n_queries": self.n_queries}


@dataclass
class RegionClsResult:
    acc_at_1: float
    acc_at_5: float
    n_regions: int
    confusion: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def true_ranks(scores: np.ndarray, truth) -> np.ndarray:
    """0-based rank of ``truth[i]`` in row ``i`` of ``scores`` under the index tie rule."""
    scores = np.asarray(scores)
    truth = np.asarray(truth)
    s_true = scores[np.arange(len(truth)), truth][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_true) | ((scores == s_true) & (cols < truth[:, None]))
    return ahead.sum(axis=1)


def recall_from_similarity(sim: np.ndarray, ks=(1, 5, 10)) -> dict:
    """Recall@K for both directions of a square image-by-text similarity matrix
    whose matches lie on the diagonal."""
    n = sim.shape[0]
    if n == 0:
        raise ValueError("retrieval needs a nonempty gallery")
    if sim.shape != (n, n):
        raise ValueError(f"expected a square similarity matrix, got {sim.shape}")
    if max(ks) > n:
        raise ValueError(f"gallery of {n} is smaller than K={max(ks)}")
    diag = np.arange(n)
    out = {}
    for name, mat in (("I2T", sim), ("T2I", sim.T)):
        ranks = true_ranks(mat, diag)
        out[name] = RetrievalResult(name, {int(k): float(np.mean(ranks < k)) for k in ks}, n)
    return out


def embed_images(model, images, chunk: int = 64):
    """``(v_g (n, d), feature_maps (n, d, g, g))`` as numpy, no tape."""
    images = np.asarray(images, dtype=np.float64)
    vs, fs = [], []
    for s in range(0, len(images), chunk):
        v, f = vision_forward_batch(images[s : s + chunk], model.params)
        vs.append(v.data)
        fs.append(f.data)
    return np.concatenate(vs), np.concatenate(fs)


def embed_texts(model, texts, chunk: int = 256) -> np.ndarray:
    out = [encode_texts(texts[s : s + chunk], model.vocab, model.params).data
           for s in range(0, len(texts), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.params.text.embed_dim))


def retrieval_eval(model, images, captions, ks=(1, 5, 10)) -> dict:
    """One caption per image; returns ``{"I2T": RetrievalResult, "T2I": ...}``."""
    if len(images) == 0 or len(images) != len(captions):
        raise ValueError(f"need matched nonempty images/captions, got {len(images)}/{len(captions)}")
    v, _ = embed_images(model, images)
    t = embed_texts(model, list(captions))
    return recall_from_similarity(_unit(v) @ _unit(t).T, ks)


def region_features(model, records, images, fmaps=None, bins=DEFAULT_BINS,
                    samples_per_bin=DEFAULT_SAMPLES) -> tuple[np.ndarray, list]:
    """RoI-view embeddings ``(K, d)`` for every region, sample-major."""
    if fmaps is None:
        _, fmaps = embed_images(model, images)
    index = [(i, j) for i, r in enumerate(records) for j in range(len(r.regions))]
    if not index:
        return np.zeros((0, fmaps.shape[1])), index
    boxes = [records[i].regions[j].bbox for i, j in index]
    pooled = roi_align_batch(Tensor(fmaps), [i for i, _ in index], boxes, bins, samples_per_bin)
    return region_embed(pooled).data, index


def region_zero_shot(model, records, images, class_names, lex: Lexicons | None = None,
                     fmaps=None) -> RegionClsResult:
    """Classify every region by its nearest ``"a {class}"`` prompt."""
    lex = lex or Lexicons()
    class_names = list(class_names)
    feats, index = region_features(model, records, images, fmaps)
    truth = []
    for i, j in index:
        cat = parse_phrase(records[i].regions[j].phrase, lex)[1]
        if cat not in class_names:
            raise ValueError(f"record {records[i].id}: category {cat!r} not among class names")
        truth.append(class_names.index(cat))
    if not truth:
        return RegionClsResult(0.0, 0.0, 0, {})
    prompts = embed_texts(model, [PROMPT.format(c) for c in class_names])
    scores = _unit(feats) @ _unit(prompts).T
    ranks = true_ranks(scores, truth)
    preds = [class_names[int(np.argmax(row))] for row in scores]
    confusion = defaultdict(Counter)
    for t, p in zip(truth, preds):
        confusion[class_names[t]][p] += 1
    return RegionClsResult(
        acc_at_1=float(np.mean(ranks < 1)),
        acc_at_5=float(np.mean(ranks < min(5, len(class_names)))),
        n_regions=len(truth),
        confusion={k: dict(sorted(v.items())) for k, v in sorted(confusion.items())},
    )


def hardneg_ranking(model, records, images, fmaps=None) -> float:
    """Fraction of regions whose positive phrase strictly beats all its negatives."""
    feats, index = region_features(model, records, images, fmaps)
    regions = [records[i].regions[j] for i, j in index]
    if not regions:
        raise ValueError("no regions to rank")
    if any(not r.hard_negatives for r in regions):
        raise ValueError("every region needs at least one hard negative")
    texts = [t for r in regions for t in [r.phrase] + [n.text for n in r.hard_negatives]]
    emb = embed_texts(model, texts)
    groups, pos = [], 0
    for r in regions:
        q = 1 + len(r.hard_negatives)
        groups.append(emb[pos : pos + q])
        pos += q
    return float(np.mean(hardneg_wins(feats, groups)))


def hardneg_wins(region_feats, candidates) -> np.ndarray:
    """Per region, whether candidate 0 has strictly the highest cosine.

    ``candidates[k]`` is a ``(Q, d)`` array of text embeddings for region ``k``
    with the positive first.
    """
    feats = _unit(np.asarray(region_feats, dtype=np.float64))
    wins = []
    for f, cand in zip(feats, candidates):
        s = _unit(np.asarray(cand, dtype=np.float64)) @ f
        wins.append(bool(s[0] > s[1:].max()))
    return np.array(wins, dtype=bool)


def phrase_heatmap(model, image, phrase: str) -> np.ndarray:
    """uint8 ``(H, W)`` map of per-patch cosine with ``phrase``, min-max scaled."""
    image = np.asarray(image, dtype=np.float64)
    _, fm = embed_images(model, image[None])
    fm = fm[0]
    d, g, _ = fm.shape
    t = _unit(embed_texts(model, [phrase])[0])
    cos = np.einsum("dij,d->ij", fm / np.maximum(np.linalg.norm(fm, axis=0, keepdims=True), 1e-8), t)
    return scale_heatmap(cos, image.shape[1], image.shape[2])


def scale_heatmap(values: np.ndarray, height: int, width: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12:
        return np.full((height, width), 128, dtype=np.uint8)
    norm = (values - lo) / (hi - lo)
    gh, gw = values.shape
    up = crop_weights(gh, 0.0, 1.0, height) @ norm @ crop_weights(gw, 0.0, 1.0, width).T
    return np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(model, image, phrase: str, out_path) -> np.ndarray:
    heat = phrase_heatmap(model, image, phrase)
    write_pgm(out_path, heat)
    return heat


def heatmap_peak(heat: np.ndarray) -> tuple[int, int]:
    """(row, col) of the brightest pixel, first in row-major order on ties."""
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(heat)), heat.shape))
