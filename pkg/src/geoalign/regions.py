"""Region views: RoIAlign pooling on the feature map and pixel-space crops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, interp_weights
from .encoders import vision_forward, vision_forward_batch

DEFAULT_BINS = (2, 2)
DEFAULT_SAMPLES = 2
MIN_AREA = 1e-4


class BoxError(ValueError):
    """Box violates the normalized xyxy invariants."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized ``[0, 1]`` xyxy coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    @classmethod
    def from_list(cls, xyxy) -> "BBox":
        x0, y0, x1, y1 = (float(v) for v in xyxy)
        return cls(x0, y0, x1, y1)

    def to_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def violations(self, min_area: float = MIN_AREA) -> list[str]:
        out = []
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            out.append("bbox range")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            out.append("bbox ordering")
        elif self.area < min_area:
            out.append("bbox area")
        return out

    def validate(self, min_area: float = MIN_AREA) -> "BBox":
        bad = self.violations(min_area)
        if bad:
            raise BoxError(f"degenerate box {self.to_list()}: {', '.join(bad)}")
        return self


def _as_box(box) -> BBox:
    return box if isinstance(box, BBox) else BBox.from_list(box)


def roi_weights(extent: int, lo: float, hi: float, bins: int, samples: int) -> np.ndarray:
    """(bins, extent) matrix averaging ``samples`` bilinear taps per bin.

    Normalized ``[lo, hi]`` maps to feature coordinates with the half-pixel
    convention ``u * extent - 0.5``; taps sit at ``(i + 0.5) / samples`` of
    each bin.
    """
    start = lo * extent - 0.5
    step = (hi - lo) * extent / bins
    offs = (np.arange(bins)[:, None] + (np.arange(samples)[None, :] + 0.5) / samples) * step
    taps = interp_weights(extent, (start + offs).ravel())
    return taps.reshape(bins, samples, extent).mean(axis=1)


def crop_weights(extent: int, lo: float, hi: float, out: int) -> np.ndarray:
    """(out, extent) bilinear resampling of the pixel span ``[lo, hi]``."""
    step = (hi - lo) * extent / out
    coords = lo * extent + (np.arange(out) + 0.5) * step - 0.5
    return interp_weights(extent, coords)


def roi_align(feature_map, box, bins=DEFAULT_BINS, samples_per_bin: int = DEFAULT_SAMPLES) -> Tensor:
    """Pool a ``(d, h, w)`` map over ``box`` into ``(d, by, bx)`` bins."""
    fm = ag.as_tensor(feature_map)
    box = _as_box(box).validate()
    by, bx = bins
    if by < 1 or bx < 1 or samples_per_bin < 1:
        raise ValueError(f"bins and samples_per_bin must be >= 1, got {bins}, {samples_per_bin}")
    _, h, w = fm.shape
    R = roi_weights(h, box.y0, box.y1, by, samples_per_bin)
    C = roi_weights(w, box.x0, box.x1, bx, samples_per_bin)
    return ag.region_average(fm, R, C)


def region_embed(roi_feat) -> Tensor:
    """Average pooling over the spatial bins: ``(..., d, by, bx) -> (..., d)``."""
    return ag.mean(ag.as_tensor(roi_feat), axis=(-2, -1))


def roi_align_batch(
    fmaps: Tensor, sample_index, boxes, bins=DEFAULT_BINS, samples_per_bin: int = DEFAULT_SAMPLES
) -> Tensor:
    """RoIAlign for K boxes over a ``(N, d, h, w)`` stack -> ``(K, d, by, bx)``.

    Box ``k`` is read from map ``sample_index[k]``.
    """
    K = len(boxes)
    _, d, h, w = fmaps.shape
    by, bx = bins
    if K == 0:
        return Tensor(np.zeros((0, d, by, bx)))
    boxes = [_as_box(b).validate() for b in boxes]
    R = np.stack([roi_weights(h, b.y0, b.y1, by, samples_per_bin) for b in boxes])
    C = np.stack([roi_weights(w, b.x0, b.x1, bx, samples_per_bin) for b in boxes])
    picked = ag.take(fmaps, sample_index, axis=0)
    return ag.region_average(picked, R[:, None], C[:, None])


def crop_pixels(image, box, out_size: int) -> Tensor:
    """Bilinear resample of the box region of a ``(3, H, W)`` image to ``out x out``."""
    img = ag.as_tensor(image)
    box = _as_box(box).validate()
    _, H, W = img.shape
    return ag.region_average(
        img, crop_weights(H, box.y0, box.y1, out_size), crop_weights(W, box.x0, box.x1, out_size)
    )


def crop_pixels_batch(images: Tensor, sample_index, boxes, out_size: int) -> Tensor:
    """Crops for K boxes from a ``(N, 3, H, W)`` stack -> ``(K, 3, out, out)``."""
    images = ag.as_tensor(images)
    _, c, H, W = images.shape
    if len(boxes) == 0:
        return Tensor(np.zeros((0, c, out_size, out_size)))
    boxes = [_as_box(b).validate() for b in boxes]
    R = np.stack([crop_weights(H, b.y0, b.y1, out_size) for b in boxes])
    C = np.stack([crop_weights(W, b.x0, b.x1, out_size) for b in boxes])
    picked = ag.take(images, sample_index, axis=0)
    return ag.region_average(picked, R[:, None], C[:, None])


def crop_view_embed(image, box, params, cfg=None) -> Tensor:
    """Re-encode the pixel crop of ``box``; returns the crop's [CLS] embedding."""
    cfg = cfg if cfg is not None else params.vision
    crop = crop_pixels(image, box, cfg.image_size)
    return vision_forward(crop, params, cfg)["v_g"]


def crop_view_embed_batch(images: Tensor, sample_index, boxes, params, cfg=None) -> Tensor:
    cfg = cfg if cfg is not None else params.vision
    if len(boxes) == 0:
        proj = params["vision.proj"] if isinstance(params, dict) else params.arrays["vision.proj"]
        return Tensor(np.zeros((0, proj.shape[1])))
    crops = crop_pixels_batch(images, sample_index, boxes, cfg.image_size)
    return vision_forward_batch(crops, params, cfg)[0]


def flatten_regions(region_counts) -> list[tuple[int, int]]:
    """Sample-major ``k -> (sample, region)`` order with region order preserved."""
    return [(i, j) for i, m in enumerate(region_counts) for j in range(m)]
