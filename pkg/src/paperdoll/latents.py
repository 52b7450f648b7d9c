"""Label-grid downsampling shared by the quantizer, sampler, and index nets.

Parsing maps live at pixel resolution; codebook indices live on coarse grids.
Labels are pooled by majority vote (plurality, ties to the smaller id), which
is stable at 16x reduction where nearest-neighbor sampling would flicker.

The texture mask is built by first painting garment classes with their texture
attribute ids on the pixel grid (everything else id 0) and then pooling. The
same mask drives codebook partition choice, expert routing, and classifier
head routing, so all stages agree on each position's texture.
"""

from __future__ import annotations

import numpy as np

from .corpus import CLS_LOWER, CLS_UPPER, N_TEXTURES


def majority_pool(grid, out_h, out_w, n_labels):
    """Pool an integer label grid to (out_h, out_w) by block plurality.

    Block shape must divide the grid exactly. Ties resolve to the smaller id.
    """
    h, w = grid.shape
    if h % out_h or w % out_w:
        raise ValueError(f"grid {h}x{w} not divisible into {out_h}x{out_w} blocks")
    bh, bw = h // out_h, w // out_w
    blocks = grid.reshape(out_h, bh, out_w, bw).transpose(0, 2, 1, 3).reshape(out_h, out_w, bh * bw)
    offsets = (np.arange(out_h * out_w) * n_labels).reshape(out_h, out_w, 1)
    counts = np.bincount((blocks + offsets).reshape(-1), minlength=out_h * out_w * n_labels)
    counts = counts.reshape(out_h, out_w, n_labels)
    return counts.argmax(axis=-1).astype(np.int64)  # argmax takes the smaller id on ties


def texture_instance_map(parsing, attrs):
    """Pixel grid of texture ids: garment classes carry their attribute, rest 0."""
    tex = np.zeros_like(parsing, dtype=np.int64)
    tex[parsing == CLS_UPPER] = attrs.upper_texture
    tex[parsing == CLS_LOWER] = attrs.lower_texture
    return tex


def latent_texture_mask(parsing, attrs, out_h, out_w):
    """Texture ids at feature resolution (majority-pooled instance map)."""
    return majority_pool(texture_instance_map(parsing, attrs), out_h, out_w, N_TEXTURES)


def patch_texture_ids(mask, patch=2):
    """Texture id per non-overlapping patch: majority of the patch's positions.

    mask: (h, w) texture ids with h, w divisible by `patch`. Ties to smaller id.
    """
    h, w = mask.shape
    return majority_pool(mask, h // patch, w // patch, N_TEXTURES)
