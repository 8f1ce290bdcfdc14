"""Proposal-driven spatial attention.

Pixel weights are accumulated proposal scores divided by the number of
selected proposals, then block-pooled down to each attacked feature layer's
resolution. The weights are treated as constants during attack optimization:
they say where to attack, they are not themselves optimized.
"""

from __future__ import annotations

import numpy as np

from advdetect.boxes import Proposal

TOP_K_PROPOSALS = 300


def select_top_proposals(
    proposals: list[Proposal], top_k: int = TOP_K_PROPOSALS
) -> list[Proposal]:
    """Keep the top_k proposals by score (stable for ties)."""
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    return [proposals[i] for i in sorted(order[:top_k])]


def compute_pixel_attention(
    proposals: list[Proposal],
    image_dims: tuple[int, int],
    per_pixel_count: bool = False,
) -> np.ndarray:
    """Per-pixel attention weights on an (height, width) grid.

    Each pixel's weight is the sum of scores of the proposals covering it,
    divided by N. By default N is the total number of selected proposals;
    with per_pixel_count=True it is instead the number of proposals covering
    that pixel (ablation variant).

    A pixel is covered when its center lies inside the proposal box
    (inclusive on the min edge, exclusive on the max edge).
    """
    h, w = image_dims
    score_sum = np.zeros((h, w), dtype=np.float64)
    cover_count = np.zeros((h, w), dtype=np.int64)
    for p in proposals:
        # pixel (r, c) has center (c + 0.5, r + 0.5)
        c0 = int(np.ceil(p.box.x_min - 0.5))
        c1 = int(np.ceil(p.box.x_max - 0.5))
        r0 = int(np.ceil(p.box.y_min - 0.5))
        r1 = int(np.ceil(p.box.y_max - 0.5))
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, w), min(r1, h)
        if c0 < c1 and r0 < r1:
            score_sum[r0:r1, c0:c1] += p.score
            cover_count[r0:r1, c0:c1] += 1
    if not proposals:
        return score_sum
    if per_pixel_count:
        return np.where(cover_count > 0, score_sum / np.maximum(cover_count, 1), 0.0)
    return score_sum / len(proposals)


def map_attention_to_layer(pixel_weights: np.ndarray, layer_stride: int) -> np.ndarray:
    """Downsample pixel attention to a feature layer by block-mean pooling.

    Output shape follows the backbone's floor-division arithmetic:
    (h // stride, w // stride); trailing rows/columns that don't fill a
    block are dropped, matching the conv shape arithmetic.
    """
    if layer_stride <= 0:
        raise ValueError(f"stride must be positive, got {layer_stride}")
    if layer_stride == 1:
        return pixel_weights.copy()
    h, w = pixel_weights.shape
    out_h, out_w = h // layer_stride, w // layer_stride
    # truncate to the region the output grid covers, then block-mean
    trimmed = pixel_weights[: out_h * layer_stride, : out_w * layer_stride]
    return trimmed.reshape(out_h, layer_stride, out_w, layer_stride).mean(axis=(1, 3))


def attention_per_layer(
    proposals: list[Proposal],
    image_dims: tuple[int, int],
    strides: list[int],
    top_k: int = TOP_K_PROPOSALS,
) -> list[np.ndarray]:
    """Convenience: top-k selection, pixel attention, and per-layer mapping."""
    selected = select_top_proposals(proposals, top_k)
    pixel = compute_pixel_attention(selected, image_dims)
    return [map_attention_to_layer(pixel, s) for s in strides]
