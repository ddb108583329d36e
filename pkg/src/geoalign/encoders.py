"""Tiny dual encoders: a patch ViT for images and a masked transformer for text.

Both encoders are pre-LN transformers that emit their [CLS] output through a
shared-dimension projection.  The vision encoder also returns the projected
patch tokens laid out as a ``d x (H/p) x (W/p)`` feature map so region
features can be pooled from it.  Nothing is L2-normalized here.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<cls>", "<unk>")

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0

# fixed pixel standardization applied before the patch projection
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25

_WORD = re.compile(r"[a-z0-9]+")


@dataclass
class VisionEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid + 1


@dataclass
class TextEncoderConfig:
    vocab_size: int
    max_tokens_base: int = 32
    max_tokens_stretched: int = 64
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.max_tokens_stretched < self.max_tokens_base:
            raise ValueError("max_tokens_stretched must be >= max_tokens_base")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class TokenVocab:
    """Word-level vocabulary with reserved PAD / CLS / UNK ids."""

    def __init__(self, words=()):
        uniq = sorted(set(words) - set(RESERVED))
        self.itos = list(RESERVED) + uniq
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts) -> "TokenVocab":
        words = set()
        for t in texts:
            words.update(split_words(t))
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenVocab) and self.itos == other.itos

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])


def tokenize(text: str, vocab: TokenVocab, max_tokens: int) -> np.ndarray:
    """Lowercase word split, CLS prepended, truncated or PAD-filled to ``max_tokens``."""
    ids = [CLS] + [vocab.stoi.get(w, UNK) for w in split_words(text)]
    ids = ids[:max_tokens]
    out = np.full(max_tokens, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(texts, vocab: TokenVocab, max_tokens: int) -> np.ndarray:
    if not texts:
        return np.zeros((0, max_tokens), dtype=np.int64)
    return np.stack([tokenize(t, vocab, max_tokens) for t in texts])


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, d: int) -> dict:
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.qkv.w": (d, 3 * d),
        f"{prefix}.attn.qkv.b": (3 * d,),
        f"{prefix}.attn.out.w": (d, d),
        f"{prefix}.attn.out.b": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, 4 * d),
        f"{prefix}.mlp.fc1.b": (4 * d,),
        f"{prefix}.mlp.fc2.w": (4 * d, d),
        f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(vcfg: VisionEncoderConfig, tcfg: TextEncoderConfig, text_len: int) -> dict:
    """Name -> shape table of every learnable tensor."""
    d, td = vcfg.embed_dim, tcfg.embed_dim
    p = vcfg.patch_size
    shapes = {
        "vision.patch.w": (3 * p * p, d),
        "vision.patch.b": (d,),
        "vision.cls": (1, d),
        "vision.pos": (vcfg.n_tokens, d),
    }
    for i in range(vcfg.depth):
        shapes.update(_block_shapes(f"vision.block{i}", d))
    shapes.update({"vision.ln_f.g": (d,), "vision.ln_f.b": (d,), "vision.proj": (d, td)})
    shapes.update({"text.tok": (tcfg.vocab_size, td), "text.pos": (text_len, td)})
    for i in range(tcfg.depth):
        shapes.update(_block_shapes(f"text.block{i}", td))
    shapes.update({"text.ln_f.g": (td,), "text.ln_f.b": (td,), "text.proj": (td, td)})
    shapes["log_temperature"] = ()
    return shapes


def sincos_2d(grid: int, dim: int) -> np.ndarray:
    """``(1 + grid*grid, dim)`` fixed 2-D sin-cos table; row 0 (CLS) is zero.

    The first half of the channels encodes the patch row, the second half the
    column, each as sin/cos pairs over geometric frequencies.
    """
    if dim % 4:
        raise ValueError(f"sin-cos table needs dim divisible by 4, got {dim}")
    q = dim // 4
    freq = 1.0 / 10000.0 ** (np.arange(q) / q)
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def enc(pos):
        ang = pos.reshape(-1, 1) * freq[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    table = np.concatenate([enc(rows), enc(cols)], axis=1)
    return np.concatenate([np.zeros((1, dim)), table], axis=0)


@dataclass
class DualEncoderParams:
    """Named float64 weight table plus the two encoder configs."""

    vision: VisionEncoderConfig
    text: TextEncoderConfig
    arrays: dict = field(default_factory=dict)

    @classmethod
    def init(cls, vision: VisionEncoderConfig, text: TextEncoderConfig, rng) -> "DualEncoderParams":
        arrays = {}
        for name, shape in param_shapes(vision, text, text.max_tokens_base).items():
            if name == "log_temperature":
                arrays[name] = np.array(math.log(TAU_INIT))
            elif name.endswith(".g"):
                arrays[name] = np.ones(shape)
            elif name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            elif name == "vision.pos":
                arrays[name] = sincos_2d(vision.grid, vision.embed_dim)
            else:
                arrays[name] = rng.normal(0.0, 0.02, size=shape)
        return cls(vision, text, arrays)

    @property
    def text_len(self) -> int:
        return self.arrays["text.pos"].shape[0]

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def leaves(self, requires_grad: bool = True) -> dict:
        """Fresh leaf tensors for one forward/backward pass."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(self.vision, self.text, {k: v.copy() for k, v in self.arrays.items()})

    def config_dict(self) -> dict:
        return {"vision": asdict(self.vision), "text": asdict(self.text)}

    def tau(self) -> float:
        return float(np.exp(np.clip(self.arrays["log_temperature"], math.log(TAU_MIN), math.log(TAU_MAX))))


def _as_leaves(params) -> dict:
    if isinstance(params, DualEncoderParams):
        return params.leaves(requires_grad=False)
    return params


def temperature(p: dict) -> Tensor:
    """tau = exp(clamp(log_temperature)) so that tau stays in [0.01, 1]."""
    return ag.exp(ag.clamp(p["log_temperature"], math.log(TAU_MIN), math.log(TAU_MAX)))


# ---------------------------------------------------------------------------
# transformer pieces


def _positions(pos: Tensor, batch: int, length: int) -> Tensor:
    idx = np.broadcast_to(np.arange(length), (batch, length))
    return ag.take(pos, idx, axis=0)


def attention_probs(x: Tensor, p: dict, prefix: str, heads: int, key_mask=None):
    """Returns ``(probs, v)`` for one attention layer; probs is (B, h, T, T)."""
    B, T, d = x.shape
    dh = d // heads
    qkv = ag.matmul(x, p[f"{prefix}.attn.qkv.w"]) + p[f"{prefix}.attn.qkv.b"]
    qkv = ag.transpose(ag.reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.scale(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    return ag.softmax(scores, mask=mask), v


def _block(x: Tensor, p: dict, prefix: str, heads: int, key_mask=None) -> Tensor:
    B, T, d = x.shape
    h = ag.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    probs, v = attention_probs(h, p, prefix, heads, key_mask)
    att = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
    x = x + (ag.matmul(att, p[f"{prefix}.attn.out.w"]) + p[f"{prefix}.attn.out.b"])
    h = ag.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = ag.gelu(ag.matmul(h, p[f"{prefix}.mlp.fc1.w"]) + p[f"{prefix}.mlp.fc1.b"])
    return x + (ag.matmul(h, p[f"{prefix}.mlp.fc2.w"]) + p[f"{prefix}.mlp.fc2.b"])


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, 3, H, W) -> (B, (H/p)*(W/p), 3*p*p), patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = ag.reshape(images, (B, C, gh, patch, gw, patch))
    x = ag.transpose(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (B, gh * gw, C * patch * patch))


def vision_forward_batch(images, params, cfg: VisionEncoderConfig | None = None):
    """Encode a ``(B, 3, H, W)`` batch; returns ``(v_g (B, d), feature_map (B, d, g, g))``."""
    p = _as_leaves(params)
    if cfg is None:
        cfg = params.vision
    images = ag.as_tensor(images)
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ag.ShapeError(
            f"expected images (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}"
        )
    B = images.shape[0]
    images = ag.add_scalar(ag.scale(images, 1.0 / PIXEL_STD), -PIXEL_MEAN / PIXEL_STD)
    x = ag.matmul(patchify(images, cfg.patch_size), p["vision.patch.w"]) + p["vision.patch.b"]
    cls = ag.reshape(ag.take(p["vision.cls"], np.zeros(B, dtype=np.int64), axis=0), (B, 1, -1))
    x = ag.concat([cls, x], axis=1)
    x = x + _positions(p["vision.pos"], B, cfg.n_tokens)
    for i in range(cfg.depth):
        x = _block(x, p, f"vision.block{i}", cfg.heads)
    x = ag.layer_norm(x, p["vision.ln_f.g"], p["vision.ln_f.b"])
    x = ag.matmul(x, p["vision.proj"])
    v_g = x[:, 0, :]
    g = cfg.grid
    fmap = ag.reshape(ag.swap_last(x[:, 1:, :]), (B, -1, g, g))
    return v_g, fmap


def vision_forward(image, params, cfg: VisionEncoderConfig | None = None) -> dict:
    """Single image ``(3, H, W)`` -> ``{"v_g": (d,), "feature_map": (d, g, g)}``."""
    image = ag.as_tensor(image)
    if image.ndim != 3:
        raise ag.ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    v_g, fmap = vision_forward_batch(ag.reshape(image, (1,) + image.shape), params, cfg)
    return {"v_g": v_g[0], "feature_map": fmap[0]}


def text_forward_batch(tokens, params, cfg: TextEncoderConfig | None = None, trim: bool = True):
    """Encode a ``(B, L)`` id matrix to ``(B, d)`` CLS embeddings.

    PAD keys are masked out of attention, so trailing all-PAD columns cannot
    influence any CLS output; with ``trim`` they are dropped before encoding.
    """
    p = _as_leaves(params)
    if cfg is None:
        cfg = params.text
    tokens = np.asarray(tokens, dtype=np.int64)
    L = p["text.pos"].shape[0]
    if tokens.ndim != 2 or tokens.shape[1] != L:
        raise ag.ShapeError(f"expected token matrix (B, {L}), got {tokens.shape}")
    if trim and tokens.shape[0]:
        used = np.nonzero((tokens != PAD).any(axis=0))[0]
        tokens = tokens[:, : int(used.max()) + 1 if used.size else 1]
    B, T = tokens.shape
    key_mask = tokens != PAD
    x = ag.take(p["text.tok"], tokens, axis=0) + _positions(p["text.pos"], B, T)
    for i in range(cfg.depth):
        x = _block(x, p, f"text.block{i}", cfg.heads, key_mask=key_mask)
    cls = x[:, 0, :]
    cls = ag.layer_norm(cls, p["text.ln_f.g"], p["text.ln_f.b"])
    return ag.matmul(cls, p["text.proj"])


def text_forward(tokens, params, cfg: TextEncoderConfig | None = None) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ag.ShapeError(f"expected a 1-D token sequence, got shape {tokens.shape}")
    return text_forward_batch(tokens[None, :], params, cfg, trim=False)[0]


def encode_texts(texts, vocab: TokenVocab, params, cfg=None) -> Tensor:
    """Encode strings, running each distinct string through the encoder once."""
    p = _as_leaves(params)
    uniq = sorted(set(texts))
    index = {t: i for i, t in enumerate(uniq)}
    L = p["text.pos"].shape[0]
    emb = text_forward_batch(tokenize_batch(uniq, vocab, L), p, cfg if cfg else params.text)
    return ag.take(emb, [index[t] for t in texts], axis=0)


# ---------------------------------------------------------------------------
# positional stretching


def stretch_weights(L0: int, L1: int, keep: int) -> np.ndarray:
    """(L1, L0) row-stochastic matrix mapping an old table to a stretched one.

    Rows ``0..keep-1`` copy the old rows verbatim; the remaining ``L1-keep``
    rows linearly interpolate across old rows ``keep..L0-1`` end to end.
    """
    if L1 < L0:
        raise ValueError(f"cannot stretch {L0} positions down to {L1}")
    if not 0 <= keep < L0:
        raise ValueError(f"keep must satisfy 0 <= keep < L0, got keep={keep}, L0={L0}")
    W = np.zeros((L1, L0))
    W[np.arange(keep), np.arange(keep)] = 1.0
    n_out, n_in = L1 - keep, L0 - keep
    if n_out == n_in:
        W[np.arange(keep, L1), np.arange(keep, L0)] = 1.0
        return W
    src = keep + (np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1))
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, L0 - 1)
    frac = src - lo
    rows = np.arange(keep, L1)
    np.add.at(W, (rows, lo), 1.0 - frac)
    np.add.at(W, (rows, hi), frac)
    return W


def default_keep(L0: int) -> int:
    return int(0.2 * L0)


def stretch_positional(pos, L1: int, keep: int | None = None) -> np.ndarray:
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=np.float64)
    L0 = pos.shape[0]
    if keep is None:
        keep = default_keep(L0)
    return stretch_weights(L0, L1, keep) @ pos


def stretch_text_positions(params: DualEncoderParams, L1: int | None = None, keep=None) -> None:
    """Grow the text positional table in place (no-op when already that long)."""
    L1 = params.text.max_tokens_stretched if L1 is None else L1
    if params.text_len >= L1:
        return
    params.arrays["text.pos"] = stretch_positional(params.arrays["text.pos"], L1, keep)
