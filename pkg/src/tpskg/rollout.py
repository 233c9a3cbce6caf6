"""Attention rollout over a recorded attention stack.

Rows index the token at layer l and columns the token at layer l-1, so
left-multiplying accumulates attention flow toward the input. Everything
here is plain numpy and sits outside the differentiation tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .vit import AttentionStack


@dataclass
class RolloutMap:
    matrix: np.ndarray
    layer_index: int


def _weights(attn) -> np.ndarray:
    w = attn.weights if isinstance(attn, AttentionStack) else np.asarray(attn)
    if w.ndim != 4:
        raise ValueError(f"expected an (L, H, T, T) attention stack, got shape {w.shape}")
    return w


def average_heads(attn, layer: int) -> np.ndarray:
    w = _weights(attn)
    if not 0 <= layer < w.shape[0]:
        raise IndexError(f"layer {layer} out of range for a {w.shape[0]}-layer stack")
    return w[layer].mean(axis=0)


def rownorm(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=-1, keepdims=True)


def rollout(attn) -> RolloutMap:
    """Layer-L rollout: rownorm(M_1 + I), then rownorm(M_l + I) @ previous."""
    w = _weights(attn)
    if w.shape[0] < 1:
        raise ValueError("rollout needs at least one layer")
    avg = np.ascontiguousarray(w.mean(axis=1))
    return RolloutMap(_kernels.rollout_chain(avg), w.shape[0])


def class_token_map(r: RolloutMap) -> np.ndarray:
    """Class-token row of the rollout with the class-token column dropped (length N)."""
    return np.array(r.matrix[0, 1:])


def patch_attention(attn) -> np.ndarray:
    return class_token_map(rollout(attn))


def batch_patch_attention(attn: np.ndarray) -> np.ndarray:
    """(B, L, H, T, T) attention -> (B, N) patch maps."""
    return np.stack([patch_attention(a) for a in attn])
