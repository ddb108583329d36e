"""Contrastive and consistency objectives over batch embeddings.

All similarity-based losses L2-normalize their inputs, so raw encoder
outputs can be passed directly.  Empty region sets (K = 0) give a loss of
exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


class Stage(str, Enum):
    STAGE_I = "StageI"
    STAGE_II = "StageII"

    @classmethod
    def parse(cls, value) -> "Stage":
        if isinstance(value, Stage):
            return value
        v = str(value).strip().lower().replace("-", "").replace("_", "")
        if v in ("1", "i", "stagei", "stage1"):
            return cls.STAGE_I
        if v in ("2", "ii", "stageii", "stage2"):
            return cls.STAGE_II
        raise ValueError(f"unknown stage {value!r}")


TERMS = ("global", "rpa", "hna", "vic", "htc")


@dataclass
class LossWeights:
    """lambda_1..lambda_5 for (global, RPA, HNA, VIC, HTC) with stage gating.

    Stage I keeps only the global term.  Stage II keeps RPA, HNA, VIC and
    HTC; the standalone global term is dropped unless ``keep_global`` since
    HTC already contains the same brief-caption contrast.
    """

    lambdas: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    stage: Stage = Stage.STAGE_II
    keep_global: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.stage = Stage.parse(self.stage)
        if len(self.lambdas) != 5:
            raise ValueError(f"expected 5 loss weights, got {len(self.lambdas)}")
        if any(l < 0 or not np.isfinite(l) for l in self.lambdas):
            raise ValueError(f"loss weights must be finite and nonnegative, got {self.lambdas}")

    def effective(self) -> dict:
        l1, l2, l3, l4, l5 = self.lambdas
        if self.stage is Stage.STAGE_I:
            return {"global": l1, "rpa": 0.0, "hna": 0.0, "vic": 0.0, "htc": 0.0}
        return {"global": l1 if self.keep_global else 0.0, "rpa": l2, "hna": l3, "vic": l4, "htc": l5}


@dataclass
class BatchEmbeddings:
    """Raw (unnormalized) embeddings of one batch.

    ``T_neg[:, 0]`` is the positive phrase of each region; the remaining Q-1
    slots are its hard negatives.  Region rows follow sample-major order.
    """

    V_g: Tensor
    T_b: Tensor
    tau: Tensor
    T_d: Tensor | None = None
    V_r: Tensor | None = None
    T_r: Tensor | None = None
    T_neg: Tensor | None = None
    V_crop: Tensor | None = None
    phrase_keys: list | None = None
    brief_keys: list | None = None
    region_index: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.V_g.shape[0]

    @property
    def K(self) -> int:
        return 0 if self.V_r is None else self.V_r.shape[0]


def _tau(tau) -> Tensor:
    return tau if isinstance(tau, Tensor) else Tensor(float(tau))


def _zero() -> Tensor:
    return Tensor(0.0)


def duplicate_mask(keys) -> np.ndarray:
    """Keep-mask hiding off-diagonal pairs that share the same key."""
    keys = list(keys)
    n = len(keys)
    same = np.array([[keys[i] == keys[j] for j in range(n)] for i in range(n)], dtype=bool)
    return ~same | np.eye(n, dtype=bool)


def _diag_sum(x: Tensor) -> Tensor:
    n = x.shape[0]
    return ag.sum(ag.take(ag.reshape(x, (n * n,)), np.arange(n) * (n + 1)))


def similarity_logits(A: Tensor, B: Tensor, tau) -> Tensor:
    """Cosine-similarity matrix divided by tau: ``(n, m)``."""
    a = ag.l2_normalize(A)
    b = ag.l2_normalize(B)
    return ag.div(ag.matmul(a, ag.swap_last(b)), _tau(tau))


def info_nce_symmetric(A, B, tau, mask=None) -> Tensor:
    """Symmetric InfoNCE over matched rows of ``A`` and ``B``.

    ``mask`` (bool ``n x n``, True = keep) removes candidates from both
    softmax denominators; the diagonal must be kept.
    """
    A, B = ag.as_tensor(A), ag.as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape != B.shape:
        raise ShapeError(f"info_nce_symmetric needs equal (n, d) inputs, got {A.shape} and {B.shape}")
    n = A.shape[0]
    if n == 0:
        return _zero()
    logits = similarity_logits(A, B, tau)
    m_t = None if mask is None else np.asarray(mask).T
    fwd = _diag_sum(ag.log_softmax_rows(logits, mask))
    bwd = _diag_sum(ag.log_softmax_rows(ag.swap_last(logits), m_t))
    return ag.scale(ag.add(fwd, bwd), -0.5 / n)


def rpa_loss(V_r, T_r, tau, phrase_keys=None) -> Tensor:
    """Region-phrase alignment: symmetric InfoNCE across the K batch regions.

    With ``phrase_keys``, regions whose positive phrases coincide are not
    used as each other's negatives.
    """
    V_r, T_r = ag.as_tensor(V_r), ag.as_tensor(T_r)
    if V_r.shape != T_r.shape:
        raise ShapeError(f"rpa_loss row mismatch: {V_r.shape} vs {T_r.shape}")
    if V_r.shape[0] == 0:
        return _zero()
    mask = None if phrase_keys is None else duplicate_mask(phrase_keys)
    return info_nce_symmetric(V_r, T_r, tau, mask)


def hna_loss(V_r, T_neg, tau) -> Tensor:
    """Hard-negative alignment: per-region softmax over its own Q descriptions,
    the positive sitting in slot 0."""
    V_r, T_neg = ag.as_tensor(V_r), ag.as_tensor(T_neg)
    if T_neg.ndim != 3 or V_r.ndim != 2 or T_neg.shape[0] != V_r.shape[0] or T_neg.shape[2] != V_r.shape[1]:
        raise ShapeError(f"hna_loss expects V_r (K, d) and T_neg (K, Q, d), got {V_r.shape}, {T_neg.shape}")
    K, Q, d = T_neg.shape
    if Q < 2:
        raise ValueError(f"hna_loss needs Q >= 2 candidates per region, got {Q}")
    if K == 0:
        return _zero()
    v = ag.reshape(ag.l2_normalize(V_r), (K, d, 1))
    sims = ag.reshape(ag.matmul(ag.l2_normalize(T_neg), v), (K, Q))
    logp = ag.log_softmax(ag.div(sims, _tau(tau)))
    return ag.scale(ag.sum(logp[:, 0]), -1.0 / K)


def vic_loss(V_r, V_crop) -> Tensor:
    """Mean cosine distance between RoI-view and crop-view region features."""
    V_r, V_crop = ag.as_tensor(V_r), ag.as_tensor(V_crop)
    if V_r.shape != V_crop.shape:
        raise ShapeError(f"vic_loss shape mismatch: {V_r.shape} vs {V_crop.shape}")
    K = V_r.shape[0]
    if K == 0:
        return _zero()
    cos = ag.sum(ag.mul(ag.l2_normalize(V_r), ag.l2_normalize(V_crop)), axis=-1)
    return ag.add_scalar(ag.scale(ag.sum(cos), -1.0 / K), 1.0)


def htc_loss(V_g, T_b, T_d, tau, brief_mask=None, detail_mask=None) -> Tensor:
    """Mean of the brief-level and detail-level global contrasts."""
    V_g, T_b, T_d = ag.as_tensor(V_g), ag.as_tensor(T_b), ag.as_tensor(T_d)
    if not (V_g.shape == T_b.shape == T_d.shape):
        raise ShapeError(f"htc_loss shape mismatch: {V_g.shape}, {T_b.shape}, {T_d.shape}")
    brief = info_nce_symmetric(V_g, T_b, tau, brief_mask)
    detail = info_nce_symmetric(V_g, T_d, tau, detail_mask)
    return ag.scale(ag.add(brief, detail), 0.5)


def total_loss(batch: BatchEmbeddings, weights: LossWeights, mask_duplicate_phrases: bool = True,
               mask_duplicate_captions: bool = True):
    """Weighted objective and the per-term (unweighted) values.

    With ``mask_duplicate_captions`` and ``batch.brief_keys`` set, samples
    sharing a brief caption are not used as each other's negatives in the
    brief-level contrasts.  Returns ``(total, breakdown)`` where ``total`` is a scalar Tensor on the
    active tape and ``breakdown`` maps term name to float.  Terms whose
    inputs are absent from the batch are skipped.
    """
    w = weights.effective()
    tau = batch.tau
    bmask = None
    if mask_duplicate_captions and batch.brief_keys is not None:
        bmask = duplicate_mask(batch.brief_keys)
    terms: dict = {"global": info_nce_symmetric(batch.V_g, batch.T_b, tau, bmask)}
    if batch.T_d is not None:
        terms["htc"] = htc_loss(batch.V_g, batch.T_b, batch.T_d, tau, brief_mask=bmask)
    if batch.V_r is not None:
        if batch.T_r is not None:
            keys = batch.phrase_keys if mask_duplicate_phrases else None
            terms["rpa"] = rpa_loss(batch.V_r, batch.T_r, tau, keys)
        if batch.T_neg is not None and (batch.K == 0 or batch.T_neg.shape[1] >= 2):
            terms["hna"] = hna_loss(batch.V_r, batch.T_neg, tau) if batch.K else _zero()
        if batch.V_crop is not None:
            terms["vic"] = vic_loss(batch.V_r, batch.V_crop)
    missing = [k for k, lam in w.items() if lam > 0 and k not in terms]
    if missing:
        raise ValueError(f"batch lacks inputs for weighted terms: {missing}")
    total = _zero()
    for name in TERMS:
        if w[name] > 0:
            total = ag.add(total, ag.scale(terms[name], w[name]))
    breakdown = {name: float(t.data) for name, t in terms.items()}
    return total, breakdown
