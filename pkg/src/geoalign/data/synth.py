"""Procedural remote-sensing-style scenes with hierarchical captions.

Each scene is a textured ground plane carrying 2-5 non-overlapping colored
objects.  Captions follow a frozen template grammar (``GRAMMAR_VERSION``) so
that region phrases can always be parsed back for hard-negative synthesis.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..regions import BBox
from .imageio import write_ppm
from .records import RegionAnnotation, SampleRecord, write_jsonl

GRAMMAR_VERSION = 1

CATEGORIES = ("tank", "pool", "court", "building", "plane", "road", "tree-cluster", "vehicle")
COLORS = {
    "red": (0.86, 0.14, 0.12),
    "blue": (0.12, 0.30, 0.92),
    "green": (0.16, 0.78, 0.22),
    "yellow": (0.93, 0.86, 0.12),
}
ROW_WORDS = ("upper", "center", "lower")
COL_WORDS = ("left", "center", "right")

# Split seeds live in disjoint ranges: seed * STRIDE + offset + index.
SEED_STRIDE = 1_000_000
TEST_OFFSET = 500_000


def location_word(row: int, col: int) -> str:
    r, c = ROW_WORDS[row], COL_WORDS[col]
    if r == "center" and c == "center":
        return "center"
    return f"{r} {c}"


LOCATIONS = tuple(location_word(r, c) for r in range(3) for c in range(3))


@dataclass
class SceneConfig:
    categories: tuple = CATEGORIES
    colors: dict = field(default_factory=lambda: dict(COLORS))
    min_objects: int = 2
    max_objects: int = 5
    image_size: int = 64

    def __post_init__(self):
        if not self.categories:
            raise ValueError("scene config needs at least one category")
        if not self.colors:
            raise ValueError("scene config needs at least one color")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


@dataclass
class SceneObject:
    category: str
    color: str
    mask: np.ndarray  # (H, W) bool, full-image
    bbox: BBox

    @property
    def location(self) -> str:
        cx = 0.5 * (self.bbox.x0 + self.bbox.x1)
        cy = 0.5 * (self.bbox.y0 + self.bbox.y1)
        return location_word(min(int(cy * 3), 2), min(int(cx * 3), 2))

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.category} in the {self.location}"


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _shape(category: str, rng) -> tuple[np.ndarray, np.ndarray]:
    """Local (mask, shade) for one object; shade scales the base color, 2.0 means white.

    Besides its outline every category carries its own interior pattern, so
    the class is visible inside a single 8-px patch and not only at edges.
    """
    if category == "tank":
        s = int(rng.integers(10, 15))
        m = _disk(s, s, s / 2, s / 2, s / 2)
        yy, xx = np.mgrid[0:s, 0:s]
        r = np.hypot(yy + 0.5 - s / 2, xx + 0.5 - s / 2)
        # concentric rings
        shade = np.where((r.astype(int) % 3) == 1, 0.45, 1.0)
    elif category == "pool":
        h, w = int(rng.integers(8, 12)), int(rng.integers(12, 17))
        m = np.ones((h, w), bool)
        shade = np.full((h, w), 0.5)
        inner = np.ones((h - 2, w - 2))
        inner[::2, :] = 0.8  # water ripples
        shade[1:-1, 1:-1] = inner
    elif category == "court":
        h, w = int(rng.integers(9, 12)), int(rng.integers(14, 18))
        m = np.ones((h, w), bool)
        shade = np.ones((h, w))
        shade[[0, -1], :] = 2.0
        shade[:, [0, -1, w // 2]] = 2.0
    elif category == "building":
        s = int(rng.integers(10, 15))
        m = np.ones((s, s), bool)
        yy, xx = np.mgrid[0:s, 0:s]
        # grid of dark windows
        shade = np.where((yy % 3 == 1) & (xx % 3 == 1), 0.35, 1.0)
    elif category == "plane":
        L, span = int(rng.integers(13, 17)), int(rng.integers(11, 15))
        w = span
        m = np.zeros((L, w), bool)
        c = w // 2
        m[:, c - 1 : c + 2] = True
        m[L // 3 : L // 3 + 3, :] = True
        m[L - 3 : L - 1, c - 3 : c + 4] = True
        shade = np.ones((L, w))
        shade[:, c] = 2.0  # white fuselage line
    elif category == "road":
        L, t = int(rng.integers(22, 32)), 4
        m = np.ones((t, L), bool)
        shade = np.full((t, L), 0.6)
        shade[1:3, :] = 1.0
        shade[1:3, ::4] = 2.0
        if rng.random() < 0.5:
            m, shade = m.T.copy(), shade.T.copy()
    elif category == "tree-cluster":
        s = int(rng.integers(11, 15))
        m = np.zeros((s, s), bool)
        for _ in range(int(rng.integers(3, 6))):
            r = rng.uniform(2.0, 3.2)
            m |= _disk(s, s, rng.uniform(r, s - r), rng.uniform(r, s - r), r)
        # leafy speckle
        shade = np.where(rng.random((s, s)) < 0.4, 0.45, 1.0)
    elif category == "vehicle":
        h, w = 4, int(rng.integers(7, 9))
        m = np.ones((h, w), bool)
        shade = np.ones((h, w))
        shade[:, w - 2 :] = 0.35
        shade[:, 1] = 2.0
        if rng.random() < 0.5:
            m, shade = m.T.copy(), shade.T.copy()
    else:
        s = int(rng.integers(8, 14))
        m = np.ones((s, s), bool)
        shade = np.ones((s, s))
    return m, shade


def _background(rng, size: int) -> np.ndarray:
    base = np.array([0.44, 0.41, 0.36]) + rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.normal(0.0, 0.07, size=(9, 9))
    t = np.linspace(0, 8, size)
    lo = np.minimum(np.floor(t).astype(int), 7)
    f = t - lo
    rows = coarse[lo] * (1 - f)[:, None] + coarse[lo + 1] * f[:, None]
    low = rows[:, lo] * (1 - f)[None, :] + rows[:, lo + 1] * f[None, :]
    fine = rng.normal(0.0, 0.03, size=(size, size))
    return base[:, None, None] + (low + fine)[None, :, :]


def render(seed: int, cfg: SceneConfig | None = None):
    """Deterministic render: returns ``(pixels (H, W, 3) uint8, [SceneObject])``."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    S = cfg.image_size
    img = _background(rng, S)
    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    occupied = np.zeros((S, S), bool)
    color_names = list(cfg.colors)
    objects = []
    for _ in range(n_target):
        category = cfg.categories[int(rng.integers(len(cfg.categories)))]
        color = color_names[int(rng.integers(len(color_names)))]
        m, shade = _shape(category, rng)
        h, w = m.shape
        for _try in range(60):
            y, x = int(rng.integers(1, S - h)), int(rng.integers(1, S - w))
            if not occupied[max(y - 2, 0) : y + h + 2, max(x - 2, 0) : x + w + 2].any():
                break
        else:
            continue
        full = np.zeros((S, S), bool)
        full[y : y + h, x : x + w] = m
        occupied |= full
        rgb = np.asarray(cfg.colors[color])[:, None]
        local = np.where(shade[m] >= 2.0, 0.97, rgb * shade[m])
        img[:, y : y + h, x : x + w][:, m] = local
        ys, xs = np.nonzero(full)
        bbox = BBox(xs.min() / S, ys.min() / S, (xs.max() + 1) / S, (ys.max() + 1) / S)
        objects.append(SceneObject(category, color, full, bbox))
    pixels = np.clip(np.rint(np.transpose(img, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    return pixels, objects


def dominant_category(objects) -> str:
    counts = Counter(o.category for o in objects)
    area = Counter()
    for o in objects:
        area[o.category] += int(o.mask.sum())
    return max(counts, key=lambda c: (counts[c], area[c], -CATEGORIES.index(c) if c in CATEGORIES else 0))


def brief_caption(objects) -> str:
    return f"a scene with {len(objects)} objects including {dominant_category(objects)}"


def detail_caption(objects) -> str:
    items = [f"a {o.phrase}" for o in objects]
    body = items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]
    return f"a scene with {len(objects)} objects: {body}."


def synth_scene(seed: int, cfg: SceneConfig | None = None, split: str = "train"):
    """One record (inline seed image) plus its rendered pixels."""
    pixels, objects = render(seed, cfg)
    if not objects:
        raise RuntimeError(f"seed {seed} placed no objects")
    record = SampleRecord(
        id=f"scene-{seed}",
        image={"seed": int(seed)},
        brief_caption=brief_caption(objects),
        detail_caption=detail_caption(objects),
        regions=[RegionAnnotation(bbox=o.bbox, phrase=o.phrase) for o in objects],
        split=split,
    )
    return record, pixels


def render_inline(image: dict) -> np.ndarray:
    return render(int(image["seed"]))[0]


def split_seeds(n: int, seed: int, split_ratio: float) -> list[tuple[str, int]]:
    """``(split, scene_seed)`` pairs; train and test draw from disjoint ranges."""
    if not 0.0 <= split_ratio <= 1.0:
        raise ValueError(f"split ratio must be in [0, 1], got {split_ratio}")
    n_train = int(round(n * split_ratio))
    base = seed * SEED_STRIDE
    return [("train", base + i) for i in range(n_train)] + [
        ("test", base + TEST_OFFSET + i) for i in range(n - n_train)
    ]


def synth_corpus(n: int, seed: int, split_ratio: float, out_dir, cfg=None,
                 jsonl_name: str = "dataset.jsonl") -> list[SampleRecord]:
    """Write ``n`` scenes as PPM files under ``out_dir/images`` plus one JSONL."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for split, s in split_seeds(n, seed, split_ratio):
        rec, pixels = synth_scene(s, cfg, split=split)
        rel = f"images/{rec.id}.ppm"
        write_ppm(os.path.join(out_dir, rel), pixels)
        rec.image = rel
        records.append(rec)
    write_jsonl(records, os.path.join(out_dir, jsonl_name))
    return records
