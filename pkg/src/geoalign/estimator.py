"""scikit-learn style wrappers around the training and screening code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data.hardneg import Lexicons, add_hard_negatives, parse_phrase
from .data.imageio import to_chw
from .data.quality import MAX_REGION_FRACTION, QualityThresholds, calibrate_thresholds, quality_filter
from .data.records import SampleRecord, load_pixels
from .evaluation import (
    PROMPT,
    _unit,
    embed_images,
    embed_texts,
    hardneg_ranking,
    region_features,
    region_zero_shot,
    retrieval_eval,
)
from .training import Model, TrainConfig, build_vocab, prepare_stage_model, run_stage


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Float64 ``(N, 3, H, W)`` in ``[0, 1]`` from uint8 HWC or float CHW input."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected a batch of images with 4 dims, got shape {X.shape}")
    if X.dtype == np.uint8:
        if X.shape[-1] != 3:
            raise ValueError(f"uint8 images must be (N, H, W, 3), got {X.shape}")
        X = np.stack([to_chw(x) for x in X])
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.shape[1] != 3:
        raise ValueError(f"float images must be (N, 3, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("float images must lie in [0, 1]")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_records(X) -> list[SampleRecord]:
    records = list(X)
    if not records:
        raise ValueError("need at least one record")
    bad = [type(r).__name__ for r in records if not isinstance(r, SampleRecord)]
    if bad:
        raise TypeError(f"expected SampleRecord items, got {bad[0]}")
    return records


def _record_images(records, images, base_dir) -> np.ndarray:
    if images is None:
        images = np.stack([to_chw(load_pixels(r, base_dir)) for r in records])
    images = check_images(images)
    if len(images) != len(records):
        raise ValueError(f"{len(records)} records but {len(images)} images")
    return images


class RegionAligner(BaseEstimator):
    """Dual encoder trained with the two-stage region-aware objective.

    ``fit`` runs Stage I then Stage II on a list of :class:`SampleRecord`.
    Regions lacking hard negatives get ``n_candidates - 1`` synthesized ones.
    """

    def __init__(self, preset: str = "toy", seed: int = 0, stage1_epochs: int | None = None,
                 stage2_epochs: int | None = None, stage1_lr: float | None = None,
                 stage2_lr: float | None = None, batch_size: int | None = None, lambdas=None,
                 keep_global: bool = False, n_candidates: int = 4, base_dir: str = "."):
        self.preset = preset
        self.seed = seed
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.batch_size = batch_size
        self.lambdas = lambdas
        self.keep_global = keep_global
        self.n_candidates = n_candidates
        self.base_dir = base_dir

    def _configs(self):
        common = dict(seed=self.seed, batch_size=self.batch_size, keep_global=self.keep_global)
        if self.lambdas is not None:
            common["lambdas"] = tuple(self.lambdas)
        c1 = TrainConfig.from_preset(self.preset, "StageI", epochs=self.stage1_epochs, lr=self.stage1_lr,
                                     **common)
        c2 = TrainConfig.from_preset(self.preset, "StageII", epochs=self.stage2_epochs, lr=self.stage2_lr,
                                     **common)
        return c1, c2

    def fit(self, X, y=None, images=None):
        records = check_records(X)
        if any(not g.hard_negatives for r in records for g in r.regions):
            records = add_hard_negatives(records, self.n_candidates, self.seed)
        images = _record_images(records, images, self.base_dir)
        c1, c2 = self._configs()
        model = Model.init(build_vocab(records), self.seed)
        model, _, log1 = run_stage(c1, records, images, model)
        self.stage1_model_ = model
        model, _, log2 = run_stage(c2, records, images, prepare_stage_model(model, "StageII"))
        self.model_ = model
        self.history_ = {"StageI": log1, "StageII": log2}
        self.n_features_out_ = model.params.vision.embed_dim
        return self

    def transform(self, X) -> np.ndarray:
        """Unit-norm global image embeddings ``(N, d)``."""
        check_is_fitted(self, "model_")
        v, _ = embed_images(self.model_, check_images(X, self.model_.params.vision.image_size))
        return _unit(v)

    def encode_text(self, texts) -> np.ndarray:
        check_is_fitted(self, "model_")
        texts = [str(t) for t in texts]
        if not texts or any(not t.strip() for t in texts):
            raise ValueError("texts must be a nonempty list of nonempty strings")
        return _unit(embed_texts(self.model_, texts))

    def predict(self, X, images=None, class_names=None) -> list:
        """Zero-shot category for every region of every record, sample-major."""
        check_is_fitted(self, "model_")
        records = check_records(X)
        images = _record_images(records, images, self.base_dir)
        class_names = list(class_names or Lexicons().categories)
        feats, _ = region_features(self.model_, records, images)
        if len(feats) == 0:
            return []
        prompts = self.encode_text([PROMPT.format(c) for c in class_names])
        return [class_names[int(i)] for i in np.argmax(_unit(feats) @ prompts.T, axis=1)]

    def score(self, X, y=None, images=None) -> float:
        """Mean image-to-text and text-to-image R@1 over detail captions."""
        check_is_fitted(self, "model_")
        records = check_records(X)
        images = _record_images(records, images, self.base_dir)
        res = retrieval_eval(self.model_, images, [r.detail_caption for r in records], ks=(1,))
        return float(np.mean([res["I2T"].recall_at[1], res["T2I"].recall_at[1]]))

    def evaluate(self, X, images=None) -> dict:
        """Retrieval, zero-shot region accuracy and hard-negative success."""
        check_is_fitted(self, "model_")
        records = check_records(X)
        if any(not g.hard_negatives for r in records for g in r.regions):
            records = add_hard_negatives(records, self.n_candidates, self.seed)
        images = _record_images(records, images, self.base_dir)
        ks = tuple(k for k in (1, 5, 10) if k <= len(records))
        _, fmaps = embed_images(self.model_, images)
        ret = retrieval_eval(self.model_, images, [r.detail_caption for r in records], ks)
        return {
            "retrieval": {k: v.recall_at for k, v in ret.items()},
            "regioncls_acc1": region_zero_shot(self.model_, records, images, Lexicons().categories,
                                               fmaps=fmaps).acc_at_1,
            "hardneg": hardneg_ranking(self.model_, records, images, fmaps=fmaps),
        }


class QualityFilter(BaseEstimator):
    """Image screening; ``fit`` calibrates the variance floors on reference images."""

    def __init__(self, percentile: float = 1.0, max_region_fraction: float = MAX_REGION_FRACTION):
        self.percentile = percentile
        self.max_region_fraction = max_region_fraction

    def fit(self, X, y=None):
        pixels = [self._check_pixels(x) for x in X]
        if not pixels:
            raise ValueError("need at least one reference image")
        th = calibrate_thresholds(pixels, self.percentile)
        self.thresholds_ = QualityThresholds(th.brightness_min, th.texture_min, self.max_region_fraction)
        return self

    @staticmethod
    def _check_pixels(x) -> np.ndarray:
        x = np.asarray(x)
        if x.dtype != np.uint8 or x.ndim != 3 or x.shape[-1] != 3:
            raise ValueError(f"expected uint8 (H, W, 3) pixels, got {x.dtype} {x.shape}")
        return x

    def reports(self, X, boxes=None) -> list:
        check_is_fitted(self, "thresholds_")
        X = list(X)
        boxes = boxes if boxes is not None else [[] for _ in X]
        if len(boxes) != len(X):
            raise ValueError(f"{len(X)} images but {len(boxes)} box lists")
        return [quality_filter(self._check_pixels(x), b, self.thresholds_, str(i))
                for i, (x, b) in enumerate(zip(X, boxes))]

    def predict(self, X, boxes=None) -> np.ndarray:
        """Boolean keep-mask."""
        return np.array([r.passed for r in self.reports(X, boxes)], dtype=bool)


def region_categories(records) -> list[str]:
    """Ground-truth category of every region, sample-major (pairs with ``predict``)."""
    lex = Lexicons()
    return [parse_phrase(g.phrase, lex)[1] for r in check_records(records) for g in r.regions]
