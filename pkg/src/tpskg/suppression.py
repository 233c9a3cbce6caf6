"""Peak suppression: hide the most-attended patch and re-run the encoder.

Training does two passes per image. The first is gradient-free and only
locates the patch with the largest rollout response; the second runs on the
tape with that patch masked out.
"""
from __future__ import annotations

import numpy as np

from .rollout import batch_patch_attention
from .tensor import no_grad
from .vit import ModelConfig, Params, forward, full_mask


def build_mask(patch_map, top_k: int = 1) -> np.ndarray:
    """Binary mask over the N+1 tokens, zero at the peak patch(es).

    Position 0 (class token) is always 1. Ties go to the lowest index.
    ``top_k`` > 1 suppresses the k largest patches (not the default).
    """
    values = np.asarray(patch_map)
    if values.ndim != 1 or values.size < 1:
        raise ValueError(f"patch map must be a non-empty vector, got shape {values.shape}")
    if not 1 <= top_k <= values.size:
        raise ValueError(f"top_k must be in [1, {values.size}], got {top_k}")
    bits = np.ones(values.size + 1, dtype=np.uint8)
    if top_k == 1:
        bits[int(np.argmax(values)) + 1] = 0
    else:
        order = np.argsort(-values, kind="stable")[:top_k]
        bits[order + 1] = 0
    return bits


def build_masks(patch_maps: np.ndarray, top_k: int = 1) -> np.ndarray:
    """(B, N) maps -> (B, N+1) boolean key masks."""
    return np.stack([build_mask(m, top_k) for m in patch_maps]).astype(bool)


def locate_peaks(images, params: Params, cfg: ModelConfig, top_k: int = 1):
    """First pass: unmasked, gradient-free. Returns (masks (B, T), patch maps (B, N))."""
    with no_grad():
        _, attn = forward(images, params, cfg, mask=None)
    maps = batch_patch_attention(attn)
    return build_masks(maps, top_k), maps


def suppressed_step(images, params: Params, cfg: ModelConfig, training: bool = True, top_k: int = 1):
    """Returns (y, masks, patch maps). Outside training this is a single plain pass."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if not training:
        y, attn = forward(images, params, cfg, mask=None)
        return y, full_mask(images.shape[0], cfg), batch_patch_attention(attn)
    masks, maps = locate_peaks(images, params, cfg, top_k)
    y, _ = forward(images, params, cfg, mask=masks)
    return y, masks, maps
