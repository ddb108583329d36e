"""Two-stage optimization: global contrastive pretraining, then joint
region-level and multi-view fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, to_storage
from .encoders import (
    TAU_MAX,
    TAU_MIN,
    DualEncoderParams,
    TextEncoderConfig,
    TokenVocab,
    VisionEncoderConfig,
    encode_texts,
    param_shapes,
    stretch_text_positions,
    temperature,
    vision_forward_batch,
)
from .data.synth import CATEGORIES
from .evaluation import PROMPT
from .losses import BatchEmbeddings, LossWeights, Stage, total_loss
from .regions import DEFAULT_BINS, DEFAULT_SAMPLES, crop_view_embed_batch, region_embed, roi_align_batch

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
NO_DECAY = frozenset({"log_temperature"})

PRESETS = {
    "paper": {
        Stage.STAGE_I: dict(epochs=1, lr=1e-4, weight_decay=0.05, warmup_iters=200, batch_size=32),
        Stage.STAGE_II: dict(epochs=5, lr=1e-6, weight_decay=1e-3, warmup_iters=50, batch_size=32),
    },
    "toy": {
        Stage.STAGE_I: dict(epochs=1, lr=1e-4, weight_decay=0.05, warmup_iters=200, batch_size=32),
        # small from-scratch model: more and larger steps, heavier HNA and HTC weights
        Stage.STAGE_II: dict(epochs=5, lr=2e-3, weight_decay=1e-3, warmup_iters=20, batch_size=8,
                             lambdas=(1.0, 1.0, 2.0, 1.0, 2.0)),
    },
}


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


class TrainingAborted(NumericalError):
    def __init__(self, message: str, last_good: "Model", state: "OptimizerState", metrics: list):
        super().__init__(message)
        self.last_good = last_good
        self.state = state
        self.metrics = metrics


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from one master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class TrainConfig:
    stage: Stage = Stage.STAGE_I
    preset: str = "toy"
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_iters: int = 200
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    grad_clip_norm: float | None = 1.0
    keep_global: bool = False
    mask_duplicate_phrases: bool = True
    mask_duplicate_captions: bool = True
    bins: tuple = DEFAULT_BINS
    samples_per_bin: int = DEFAULT_SAMPLES
    max_steps: int | None = None

    def __post_init__(self):
        self.stage = Stage.parse(self.stage)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.bins = tuple(int(b) for b in self.bins)
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_preset(cls, preset: str, stage, **overrides) -> "TrainConfig":
        stage = Stage.parse(stage)
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[preset][stage])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(stage=stage, preset=preset, **values)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambdas, self.stage, self.keep_global)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["lambdas"] = list(self.lambdas)
        d["bins"] = list(self.bins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Model:
    """Encoder weights together with the vocabulary their token table indexes."""

    params: DualEncoderParams
    vocab: TokenVocab

    @classmethod
    def init(cls, vocab: TokenVocab, seed: int, vision: VisionEncoderConfig | None = None,
             text_overrides: dict | None = None) -> "Model":
        vision = vision or VisionEncoderConfig()
        tcfg = TextEncoderConfig(vocab_size=len(vocab), **(text_overrides or {}))
        params = DualEncoderParams.init(vision, tcfg, substream(seed, "init"))
        params.arrays = {k: to_storage(v) for k, v in params.arrays.items()}
        return cls(params, vocab)

    def copy(self) -> "Model":
        return Model(self.params.copy(), self.vocab)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.step)


# ---------------------------------------------------------------------------
# optimizer and schedule


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr_t: float,
               weight_decay: float, no_decay=NO_DECAY):
    """Bias-corrected AdamW with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if not lr_t >= 0:
        raise ValueError(f"learning rate must be >= 0, got {lr_t}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient in {sorted(bad)}")
    b1, b2 = ADAM_BETAS
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ag.ShapeError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        decay = 0.0 if name in no_decay else weight_decay
        new_p[name] = p * (1 - lr_t * decay) - lr_t * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(new_m, new_v, step)


def cosine_warmup_lr(step: int, total_steps: int, warmup: int, base_lr: float) -> float:
    """Linear ramp from 0 at step 0 to ``base_lr`` at ``warmup``, then cosine to 0
    at ``total_steps``.  Optimizer update number ``s`` (1-based) uses ``lr(s)``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup >= total_steps:
        raise ValueError(f"warmup ({warmup}) must be < total_steps ({total_steps})")
    if step < warmup:
        return base_lr * step / warmup
    progress = min((step - warmup) / (total_steps - warmup), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict, max_norm: float | None):
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    # fixed summation order so a reloaded checkpoint reproduces the norm bitwise
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if not max_norm or norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# batches


def assemble_batch(records, images, p: dict, params: DualEncoderParams, vocab: TokenVocab,
                   stage=Stage.STAGE_II, bins=DEFAULT_BINS, samples_per_bin=DEFAULT_SAMPLES) -> BatchEmbeddings:
    """Encode one batch.

    ``images`` is the ``(N, 3, H, W)`` pixel stack aligned with ``records``;
    ``p`` is the tensor table the forward pass should read (leaf tensors when
    training).  Regions are flattened sample-major.
    """
    stage = Stage.parse(stage)
    if len(records) == 0:
        raise ValueError("assemble_batch needs a nonempty batch")
    images = ag.as_tensor(images)
    if images.shape[0] != len(records):
        raise ValueError(f"{len(records)} records but {images.shape[0]} images")
    vcfg, tcfg = params.vision, params.text
    v_g, fmaps = vision_forward_batch(images, p, vcfg)
    tau = temperature(p)
    briefs = [r.brief_caption for r in records]
    if stage is Stage.STAGE_I:
        return BatchEmbeddings(V_g=v_g, T_b=encode_texts(briefs, vocab, p, tcfg), tau=tau,
                               brief_keys=briefs)

    index = [(i, j) for i, r in enumerate(records) for j in range(len(r.regions))]
    regions = [records[i].regions[j] for i, j in index]
    K = len(regions)
    qs = {1 + len(r.hard_negatives) for r in regions}
    if len(qs) > 1:
        raise ValueError(f"regions carry differing numbers of hard negatives: {sorted(qs)}")
    Q = qs.pop() if qs else 1
    cand = [t for r in regions for t in [r.phrase] + [n.text for n in r.hard_negatives]]
    short = encode_texts(briefs + cand, vocab, p, tcfg)
    N = len(records)
    T_b = short[:N]
    T_d = encode_texts([r.detail_caption for r in records], vocab, p, tcfg)
    d = T_b.shape[1]
    sample_index = [i for i, _ in index]
    boxes = [r.bbox for r in regions]
    if K:
        T_neg = ag.reshape(short[N:], (K, Q, d))
        T_r = T_neg[:, 0, :]
        V_r = region_embed(roi_align_batch(fmaps, sample_index, boxes, bins, samples_per_bin))
        V_crop = crop_view_embed_batch(images, sample_index, boxes, p, vcfg)
    else:
        T_neg = ag.Tensor(np.zeros((0, max(Q, 2), d)))
        T_r = V_r = V_crop = ag.Tensor(np.zeros((0, d)))
    return BatchEmbeddings(
        V_g=v_g, T_b=T_b, T_d=T_d, tau=tau, V_r=V_r, T_r=T_r,
        T_neg=T_neg if Q >= 2 or K == 0 else None, V_crop=V_crop,
        phrase_keys=[r.phrase for r in regions], brief_keys=briefs, region_index=index,
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` from a per-epoch derived seed."""
    rng = substream(seed, f"shuffle/{epoch}")
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


# ---------------------------------------------------------------------------
# stage loop


def _round_storage(arrays: dict) -> dict:
    return {k: to_storage(v) for k, v in arrays.items()}


def _clamp_temperature(arrays: dict) -> None:
    arrays["log_temperature"] = to_storage(
        np.clip(arrays["log_temperature"], math.log(TAU_MIN), math.log(TAU_MAX))
    )


def train_step(model: Model, state: OptimizerState, records, images, cfg: TrainConfig, lr_t: float):
    """One forward/backward/update.  Returns ``(model, state, metrics)``."""
    params = model.params
    with ag.Tape() as tape:
        leaves = params.leaves(requires_grad=True)
        batch = assemble_batch(records, images, leaves, params, model.vocab, cfg.stage,
                               cfg.bins, cfg.samples_per_bin)
        loss, terms = total_loss(batch, cfg.weights, cfg.mask_duplicate_phrases,
                                 cfg.mask_duplicate_captions)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss {float(loss.data)} ({terms})")
    grads = tape.backward(loss)
    grads = {k: grads[t] for k, t in leaves.items()}
    grads, gnorm = clip_grad_norm(grads, cfg.grad_clip_norm)
    new_arrays, new_state = adamw_step(params.arrays, grads, state, lr_t, cfg.weight_decay)
    new_arrays = _round_storage(new_arrays)
    _clamp_temperature(new_arrays)
    new_state = OptimizerState(_round_storage(new_state.m), _round_storage(new_state.v), new_state.step)
    new_params = DualEncoderParams(params.vision, params.text, new_arrays)
    metrics = {
        "loss": float(loss.data),
        **{f"loss_{k}": v for k, v in terms.items()},
        "grad_norm": gnorm,
        "tau": float(batch.tau.data),
        "N": batch.N,
        "K": batch.K,
    }
    return Model(new_params, model.vocab), new_state, metrics


def corpus_texts(records) -> list[str]:
    """Every caption, phrase and negative in ``records``, in record order."""
    out = []
    for r in records:
        out += [r.brief_caption, r.detail_caption]
        for g in r.regions:
            out.append(g.phrase)
            out += [n.text for n in g.hard_negatives]
    return out


def build_vocab(records, extra_texts=()) -> TokenVocab:
    """Vocabulary over the training texts plus the zero-shot prompt words."""
    prompts = [PROMPT.format(c) for c in CATEGORIES]
    return TokenVocab.from_texts(corpus_texts(records) + prompts + list(extra_texts))


def prepare_stage_model(model: Model, stage) -> Model:
    """Stage II widens the text context by stretching the positional table."""
    if Stage.parse(stage) is Stage.STAGE_II:
        model = model.copy()
        stretch_text_positions(model.params)
        model.params.arrays["text.pos"] = to_storage(model.params.arrays["text.pos"])
    return model


def run_stage(cfg: TrainConfig, records, images, model: Model, state: OptimizerState | None = None,
              log_fh=None, on_step=None):
    """Optimize ``model`` for one stage.

    ``images`` is the ``(N, 3, H, W)`` stack aligned with ``records``.  Pass
    ``state`` to resume; its step count locates the position in the
    schedule and the epoch shuffle.  Returns ``(model, state, metrics_log)``.
    """
    n = len(records)
    if n == 0:
        raise ValueError("no training records")
    if cfg.stage is Stage.STAGE_II:
        missing = [r.id for r in records if any(len(reg.hard_negatives) == 0 for reg in r.regions)]
        if missing and cfg.lambdas[2] > 0:
            raise ValueError(f"Stage II needs hard negatives; missing in {missing[:3]}")
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = min(cfg.warmup_iters, total - 1)
    if warmup != cfg.warmup_iters:
        log.warning("warmup %d >= %d total steps; using %d", cfg.warmup_iters, total, warmup)
    if state is None:
        state = OptimizerState.zeros_like(model.params.arrays)
    last = total if cfg.max_steps is None else min(total, state.step + cfg.max_steps)
    images = np.asarray(images, dtype=np.float64)
    metrics_log = []
    while state.step < last:
        step = state.step
        epoch, pos = divmod(step, per_epoch)
        order = epoch_order(n, cfg.seed, epoch)
        idx = np.sort(order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size])
        lr_t = cosine_warmup_lr(step + 1, total, warmup, cfg.lr)
        try:
            model, state, m = train_step(model, state, [records[i] for i in idx], images[idx], cfg, lr_t)
        except NumericalError as exc:
            raise TrainingAborted(str(exc), model, state, metrics_log) from exc
        entry = {"step": state.step, "epoch": epoch, "lr": lr_t, **m}
        metrics_log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
        if on_step is not None:
            on_step(entry)
    return model, state, metrics_log


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(model: Model, cfg: TrainConfig | None = None, state: OptimizerState | None = None,
                  extra: dict | None = None) -> Checkpoint:
    meta = {
        "format": "geoalign",
        "model": model.params.config_dict(),
        "text_len": model.params.text_len,
        "vocab": model.vocab.to_list(),
        "train": cfg.to_dict() if cfg else None,
        "rng": {"seed": cfg.seed if cfg else None, "stream": "shuffle/<epoch>",
                "step": state.step if state else 0},
    }
    if extra:
        meta.update(extra)
    moments = {}
    if state is not None:
        moments = {k: (state.m[k], state.v[k]) for k in state.m}
    return Checkpoint(meta, dict(model.params.arrays), state.step if state else None, moments)


def from_checkpoint(ck: Checkpoint):
    """Returns ``(model, train_config_or_None, optimizer_state_or_None)``."""
    mc = ck.meta["model"]
    vision = VisionEncoderConfig(**mc["vision"])
    text = TextEncoderConfig(**mc["text"])
    params = DualEncoderParams(vision, text, dict(ck.tensors))
    expected = param_shapes(vision, text, ck.meta["text_len"])
    missing = sorted(set(expected) - set(ck.tensors))
    if missing:
        raise ckpt_io.CheckpointError(f"checkpoint lacks tensors {missing[:5]}")
    for name, shape in expected.items():
        if tuple(ck.tensors[name].shape) != tuple(shape):
            raise ckpt_io.CheckpointError(f"tensor {name} has shape {ck.tensors[name].shape}, expected {shape}")
    model = Model(params, TokenVocab(ck.meta["vocab"]))
    cfg = TrainConfig.from_dict(ck.meta["train"]) if ck.meta.get("train") else None
    state = None
    if ck.has_optimizer:
        state = OptimizerState({k: mv[0] for k, mv in ck.moments.items()},
                               {k: mv[1] for k, mv in ck.moments.items()}, ck.optimizer_step)
    return model, cfg, state


def save_model(path, model: Model, cfg=None, state=None, extra=None) -> None:
    ckpt_io.save(to_checkpoint(model, cfg, state, extra), path)


def load_model(path):
    return from_checkpoint(ckpt_io.load(path))
