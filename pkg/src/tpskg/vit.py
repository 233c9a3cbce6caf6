"""Vision-transformer encoder: patch embedding, class token, pre-norm blocks.

The forward pass accepts a per-image key mask. A masked token contributes no
patch content to its embedding (its positional embedding is kept) and every
attention logit pointing at it is pushed to ``MASK_LOGIT`` before softmax, so
nothing downstream can read from it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    getitem,
    layernorm,
    linear,
    matmul,
    mul,
    reshape,
    softmax,
    swap_last,
    transpose,
)

MASK_LOGIT = -1e9
LN_EPS = 1e-6
INIT_STD = 0.02


class ConfigError(ValueError):
    """Model configuration or input dimensions are inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    patch: int = 8
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 8
    seed: int = 0

    def __post_init__(self):
        for key in ("image_h", "image_w", "channels", "patch", "embed_dim", "layers", "heads", "classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch size {self.patch}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Params(dict):
    """Ordered name -> Tensor mapping; iteration order is the optimizer visit order."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def astype(self, dtype) -> "Params":
        return Params((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)) for k, v in self.items())


def _param(store: Params, name: str, value: np.ndarray) -> None:
    store[name] = Tensor(value, requires_grad=True, name=name)


def glorot_std(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> Params:
    """Embeddings: truncated normal, std 0.02. Linear projections: truncated
    normal with Glorot std, so plain SGD gets usable signal from the first step."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    d, hid = cfg.embed_dim, cfg.hidden_dim

    def proj(fan_in, fan_out):
        return trunc_normal(rng, (fan_in, fan_out), std=glorot_std(fan_in, fan_out), dtype=dtype)

    p = Params()
    _param(p, "patch_proj", proj(cfg.patch_dim, d))
    _param(p, "cls_token", trunc_normal(rng, (1, d), dtype=dtype))
    _param(p, "pos_embed", trunc_normal(rng, (cfg.tokens, d), dtype=dtype))
    for layer in range(cfg.layers):
        pre = f"blocks.{layer}."
        _param(p, pre + "ln1.gain", np.ones(d, dtype=dtype))
        _param(p, pre + "ln1.bias", np.zeros(d, dtype=dtype))
        for name in ("q", "k", "v", "o"):
            _param(p, pre + f"attn.w{name}", proj(d, d))
            _param(p, pre + f"attn.b{name}", np.zeros(d, dtype=dtype))
        _param(p, pre + "ln2.gain", np.ones(d, dtype=dtype))
        _param(p, pre + "ln2.bias", np.zeros(d, dtype=dtype))
        _param(p, pre + "mlp.w1", proj(d, hid))
        _param(p, pre + "mlp.b1", np.zeros(hid, dtype=dtype))
        _param(p, pre + "mlp.w2", proj(hid, d))
        _param(p, pre + "mlp.b2", np.zeros(d, dtype=dtype))
    _param(p, "ln_f.gain", np.ones(d, dtype=dtype))
    _param(p, "ln_f.bias", np.zeros(d, dtype=dtype))
    return p


# ------------------------------------------------------------------ patches


def patchify(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C), or batched (B, H, W, C) -> (B, N, P*P*C).

    Patches are ordered row-major over the grid and each patch is flattened
    row-major as (row, col, channel).
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    x = image if batched else image[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ConfigError(
            f"image shape {image.shape} does not match config "
            f"({cfg.image_h}, {cfg.image_w}, {cfg.channels})"
        )
    b, p = x.shape[0], cfg.patch
    gh, gw = cfg.grid
    out = x.reshape(b, gh, p, gw, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, gh * gw, cfg.patch_dim)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    b, p = x.shape[0], cfg.patch
    gh, gw = cfg.grid
    out = x.reshape(b, gh, gw, p, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, cfg.image_h, cfg.image_w, cfg.channels)
    return out if batched else out[0]


# --------------------------------------------------------------------- masks


def full_mask(batch: int, cfg: ModelConfig) -> np.ndarray:
    return np.ones((batch, cfg.tokens), dtype=bool)


def _normalize_mask(mask, batch: int, tokens: int) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    if m.ndim == 1:
        m = np.broadcast_to(m, (batch, m.shape[0]))
    if m.shape != (batch, tokens):
        raise ConfigError(f"key mask shape {m.shape} does not match ({batch}, {tokens})")
    if not m[:, 0].all():
        raise ConfigError("class token (position 0) must stay attendable")
    return None if m.all() else m


# ------------------------------------------------------------------ forward


@dataclass
class AttentionStack:
    """Post-softmax attention of one image: shape (layers, heads, T, T)."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[-1] != self.weights.shape[-2]:
            raise ValueError(f"attention stack must be (L, H, T, T), got {self.weights.shape}")

    @property
    def layers(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def tokens(self) -> int:
        return self.weights.shape[-1]


def embed(patches, params: Params, mask=None) -> Tensor:
    """Token sequence (B, T, D): class token, masked patch embeddings, plus positions."""
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    dtype = params["patch_proj"].dtype
    b = patches.shape[0]
    d = params["patch_proj"].shape[1]
    tokens = patches.shape[1] + 1
    m = _normalize_mask(mask, b, tokens)
    content = matmul(Tensor(patches.astype(dtype, copy=False)), params["patch_proj"])
    if m is not None:
        content = mul(content, m[:, 1:, None].astype(dtype))
    cls = broadcast_to(params["cls_token"], (b, 1, d))
    z = concat([cls, content], axis=1)
    return add(z, params["pos_embed"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(x: Tensor, params: Params, prefix: str, heads: int, key_bias):
    """Multi-head self-attention. Returns (output, post-softmax weights)."""
    q = _split_heads(linear(x, params[prefix + "wq"], params[prefix + "bq"]), heads)
    k = _split_heads(linear(x, params[prefix + "wk"], params[prefix + "bk"]), heads)
    v = _split_heads(linear(x, params[prefix + "wv"], params[prefix + "bv"]), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last(k)), scale)
    weights = softmax(scores, axis=-1, bias=key_bias)
    out = _merge_heads(matmul(weights, v))
    return linear(out, params[prefix + "wo"], params[prefix + "bo"]), weights


def encode(z0: Tensor, params: Params, cfg: ModelConfig, mask=None):
    """Run the L pre-norm blocks. Returns (y (B, D), attention (B, L, H, T, T))."""
    b, t, _ = z0.shape
    m = _normalize_mask(mask, b, t)
    key_bias = None
    if m is not None:
        key_bias = np.where(m, 0.0, MASK_LOGIT).astype(z0.dtype)[:, None, None, :]
    z = z0
    attn = np.empty((b, cfg.layers, cfg.heads, t, t), dtype=z0.dtype)
    for layer in range(cfg.layers):
        pre = f"blocks.{layer}."
        h = layernorm(z, params[pre + "ln1.gain"], params[pre + "ln1.bias"], LN_EPS)
        a, w = attention(h, params, pre + "attn.", cfg.heads, key_bias)
        attn[:, layer] = w.data
        z = add(z, a)
        h = layernorm(z, params[pre + "ln2.gain"], params[pre + "ln2.bias"], LN_EPS)
        h = linear(gelu(linear(h, params[pre + "mlp.w1"], params[pre + "mlp.b1"])),
                   params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        z = add(z, h)
    cls = getitem(z, (slice(None), 0))
    y = layernorm(cls, params["ln_f.gain"], params["ln_f.bias"], LN_EPS)
    return y, attn


def forward(images, params: Params, cfg: ModelConfig, mask=None):
    """Images (B, H, W, C) -> (y (B, D), attention (B, L, H, T, T))."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    patches = patchify(images, cfg)
    z0 = embed(patches, params, mask)
    return encode(z0, params, cfg, mask)
