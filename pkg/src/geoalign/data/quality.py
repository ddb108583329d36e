"""Rule-based image quality screening."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..regions import BBox

MAX_REGION_FRACTION = 0.75

# 1st-percentile ("lower") statistics over the 100 reference scenes with seeds
# 0..99, truncated; reproducible with `geoalign calibrate --n 100 --seed 0`.
DEFAULT_BRIGHTNESS_MIN = 0.00335
DEFAULT_TEXTURE_MIN = 0.02162


@dataclass
class QualityThresholds:
    brightness_min: float = DEFAULT_BRIGHTNESS_MIN
    texture_min: float = DEFAULT_TEXTURE_MIN
    max_region_fraction: float = MAX_REGION_FRACTION


@dataclass
class QualityReport:
    id: str
    brightness_variance: float
    texture_variance: float
    max_region_area_fraction: float
    single_region_fraction: float
    union_region_fraction: float
    verdict: str
    reasons: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """Luma in ``[0, 1]`` from uint8 ``(H, W, 3)``."""
    rgb = pixels.astype(np.float64) / 255.0
    return rgb @ np.array([0.299, 0.587, 0.114])


def laplacian(gray: np.ndarray) -> np.ndarray:
    """3x3 4-neighbour Laplacian over the valid interior."""
    return (
        gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2] + gray[1:-1, 2:] - 4.0 * gray[1:-1, 1:-1]
    )


def union_area(boxes) -> float:
    """Exact area of the union of normalized boxes (coordinate compression)."""
    boxes = [b if isinstance(b, BBox) else BBox.from_list(b) for b in boxes]
    if not boxes:
        return 0.0
    xs = sorted({v for b in boxes for v in (b.x0, b.x1)})
    ys = sorted({v for b in boxes for v in (b.y0, b.y1)})
    total = 0.0
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            cx, cy = 0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])
            if any(b.x0 <= cx <= b.x1 and b.y0 <= cy <= b.y1 for b in boxes):
                total += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
    return total


def image_stats(pixels: np.ndarray) -> tuple[float, float]:
    gray = grayscale(pixels)
    return float(gray.var()), float(laplacian(gray).var())


def quality_filter(pixels, boxes, thresholds: QualityThresholds | None = None,
                   record_id: str = "") -> QualityReport:
    """Screen one image.  ``pixels=None`` stands for an undecodable image."""
    th = thresholds or QualityThresholds()
    if pixels is None:
        return QualityReport(record_id, 0.0, 0.0, 0.0, 0.0, 0.0, "reject", ["io"])
    bvar, tvar = image_stats(pixels)
    boxes = [b if isinstance(b, BBox) else BBox.from_list(b) for b in boxes]
    single = max((b.area for b in boxes), default=0.0)
    union = union_area(boxes)
    frac = max(single, union)
    reasons = []
    if bvar < th.brightness_min:
        reasons.append("brightness")
    if tvar < th.texture_min:
        reasons.append("texture")
    if frac > th.max_region_fraction:
        reasons.append("region_area")
    return QualityReport(
        id=record_id,
        brightness_variance=bvar,
        texture_variance=tvar,
        max_region_area_fraction=frac,
        single_region_fraction=single,
        union_region_fraction=union,
        verdict="reject" if reasons else "pass",
        reasons=reasons,
    )


def calibrate_thresholds(pixel_list, percentile: float = 1.0) -> QualityThresholds:
    """Variance floors at the given percentile ("lower" method, so every
    reference image at or above the percentile rank passes)."""
    stats = np.array([image_stats(p) for p in pixel_list])
    b = float(np.percentile(stats[:, 0], percentile, method="lower"))
    t = float(np.percentile(stats[:, 1], percentile, method="lower"))
    return QualityThresholds(brightness_min=b, texture_min=t)
