"""Coarse-level index sampler: iterative unmasking with per-texture experts.

A shared transformer trunk reads the sum of four embeddings per grid position
(committed-or-MASK code token, segmentation token, texture token, position)
and each position's logits come from the expert head of its texture id. In
`moe=False` mode a single shared head predicts over the merged index space of
all partitions (the texture-blind baseline the ablation trains against).

Sampling starts fully masked and commits a fixed quota of positions per step,
highest model confidence first; committed positions are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import latents
from .corpus import N_CLASSES, N_TEXTURES
from .nn import adam_step, checkpoint, no_grad
from .nn import tensor as T
from .nn.layers import Embedding, LayerNorm, Linear, Module, RoutedHeads, TransformerBlock
from .nn.tensor import Variable
from .vq import K_TOP, TOP_H, TOP_W, TokenGrid

N_POS = TOP_H * TOP_W


@dataclass
class ConditionTokens:
    """Segmentation and texture labels pooled to the token grid."""

    seg: np.ndarray  # (TOP_H, TOP_W) parsing class ids
    tex: np.ndarray  # (TOP_H, TOP_W) texture ids


def tokenize_conditions(parsing, attrs):
    """Majority-pool parsing to the grid; texture ids from the instance map."""
    seg = latents.majority_pool(parsing, TOP_H, TOP_W, N_CLASSES)
    tex = latents.latent_texture_mask(parsing, attrs, TOP_H, TOP_W)
    return ConditionTokens(seg=seg, tex=tex)


def encode_global(indices, texture_ids, k=K_TOP):
    """Partition-local indices -> rows of the code embedding table.

    MASK (-1) maps to the dedicated final row.
    """
    out = texture_ids * k + indices
    return np.where(indices == TokenGrid.MASK, N_TEXTURES * k, out)


class MoeSampler(Module):
    """Transformer trunk with per-texture expert heads (or one shared head)."""

    def __init__(self, rng, d=128, heads=4, blocks=4, k=K_TOP, moe=True, dtype=np.float32):
        super().__init__()
        self.d = d
        self.k = k
        self.moe = moe
        self.dtype = dtype
        self.n_heads = heads
        self.n_blocks = blocks
        self.emb_code = Embedding(rng, N_TEXTURES * k + 1, d, dtype=dtype)
        self.emb_seg = Embedding(rng, N_CLASSES, d, dtype=dtype)
        self.emb_tex = Embedding(rng, N_TEXTURES, d, dtype=dtype)
        self.emb_pos = Embedding(rng, N_POS, d, dtype=dtype)
        self.blocks = [TransformerBlock(rng, d, heads, dtype=dtype) for _ in range(blocks)]
        self.ln_f = LayerNorm(d, dtype=dtype)
        if moe:
            self.heads = RoutedHeads(rng, N_TEXTURES, d, k, dtype=dtype)
        else:
            self.head = Linear(rng, d, N_TEXTURES * k, dtype=dtype)

    def __call__(self, code_rows, seg, tex, attn_mode=None):
        """code_rows/seg/tex: int (B, N_POS) -> logits (B, N_POS, K or 5K)."""
        pos = np.broadcast_to(np.arange(N_POS), code_rows.shape)
        x = self.emb_code(code_rows) + self.emb_seg(seg) + self.emb_tex(tex) + self.emb_pos(pos)
        for block in self.blocks:
            x = block(x, attn_mode=attn_mode)
        x = self.ln_f(x)
        if self.moe:
            return self.heads(x, tex)
        return self.head(x)

    def save(self, path, meta=None):
        m = {"d": self.d, "heads": self.n_heads, "blocks": self.n_blocks,
             "k": self.k, "moe": self.moe}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), d=int(meta["d"]), heads=int(meta["heads"]),
                    blocks=int(meta["blocks"]), k=int(meta["k"]), moe=bool(meta["moe"]),
                    dtype=dtype)
        model.load_state_dict(arrays)
        return model


def sampler_forward(model, tokens, cond, attn_mode=None):
    """Logits for one grid: (N_POS, K) in MoE mode, (N_POS, 5K) otherwise."""
    rows = encode_global(tokens.indices, tokens.texture_ids, model.k).reshape(1, N_POS)
    seg = cond.seg.reshape(1, N_POS)
    tex = tokens.texture_ids.reshape(1, N_POS)
    with no_grad():
        logits = model(rows, seg, tex, attn_mode=attn_mode)
    return logits.data[0]


def _categorical(rng, probs):
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


def diffusion_sample(model, cond, steps=8, seed=0, temperature=1.0, policy="confidence",
                     return_trace=False):
    """Iterative unmasking from an all-MASK grid.

    Each step commits ceil(N/steps) of the still-masked positions — the most
    confident ones under `policy`="confidence", or a seeded uniform choice
    under `policy`="random". Committed values are drawn from the position's
    categorical at `temperature` and never revisited.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng([97, seed])
    seg = cond.seg.reshape(1, N_POS)
    tex = cond.tex.reshape(1, N_POS).astype(np.int64)
    mask_row = N_TEXTURES * model.k
    # MoE mode commits partition-local indices; the shared-head baseline
    # commits merged-space indices and splits them at the end.
    committed = np.full(N_POS, TokenGrid.MASK, dtype=np.int64)
    quota = math.ceil(N_POS / steps)
    trace = []
    for _ in range(steps):
        masked = np.where(committed == TokenGrid.MASK)[0]
        if masked.size == 0:
            break
        if model.moe:
            rows = np.where(committed == TokenGrid.MASK, mask_row, tex[0] * model.k + committed)
        else:
            rows = np.where(committed == TokenGrid.MASK, mask_row, committed)
        with no_grad():
            logits = model(rows.reshape(1, N_POS), seg, tex).data[0]
        scaled = logits / max(temperature, 1e-8)
        z = scaled - scaled.max(axis=-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=-1, keepdims=True)
        take = min(quota, masked.size)
        if policy == "confidence":
            conf = probs[masked].max(axis=-1)
            order = np.lexsort((masked, -conf))  # stable: ties to lower position
            chosen = masked[order[:take]]
        elif policy == "random":
            chosen = rng.choice(masked, size=take, replace=False)
        else:
            raise ValueError(f"unknown commit policy: {policy}")
        for p in np.sort(chosen):
            committed[p] = _categorical(rng, probs[p])
        trace.append([int(p) for p in np.sort(chosen)])
    if (committed == TokenGrid.MASK).any():
        raise AssertionError("sampling finished with MASK positions")
    if model.moe:
        grid = TokenGrid(
            indices=committed.reshape(TOP_H, TOP_W),
            texture_ids=cond.tex.astype(np.int64).copy(),
        )
    else:
        grid = TokenGrid(
            indices=(committed % model.k).reshape(TOP_H, TOP_W),
            texture_ids=(committed // model.k).reshape(TOP_H, TOP_W),
        )
    return (grid, trace) if return_trace else grid


@dataclass
class SamplerHistory:
    losses: list = field(default_factory=list)
    per_expert: dict = field(default_factory=dict)


def make_token_dataset(vq_model, records):
    """Ground-truth top token grids + condition tokens for a corpus."""
    out = []
    for r in records:
        cond = tokenize_conditions(r.parsing, r.attrs)
        _, tokens = vq_model.encode_top_tokens(r.image.astype(vq_model.dtype), cond.tex)
        out.append((tokens, cond))
    return out


def train_sampler(model, token_dataset, epochs, lr=1e-4, batch_size=8, seed=0, log=None,
                  mask_ratio_range=(0.15, 1.0)):
    """Masked-token cross-entropy on ground-truth grids.

    Positions are masked with a per-example ratio drawn uniformly from
    `mask_ratio_range`; the loss covers masked positions only.
    """
    rng = np.random.default_rng([30, seed])
    n = len(token_dataset)
    locals_ = np.stack([t.indices for t, _ in token_dataset]).reshape(n, N_POS)
    texs = np.stack([t.texture_ids for t, _ in token_dataset]).reshape(n, N_POS)
    segs = np.stack([c.seg for _, c in token_dataset]).reshape(n, N_POS)
    globals_ = texs * model.k + locals_
    params = model.parameters()
    history = SamplerHistory()
    expert_loss = np.zeros(N_TEXTURES)
    expert_count = np.zeros(N_TEXTURES)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        last = epoch == epochs - 1
        if last:
            expert_loss[:] = 0
            expert_count[:] = 0
        for i in range(0, n, batch_size):
            sel = order[i : i + batch_size]
            B = len(sel)
            ratios = rng.uniform(*mask_ratio_range, size=(B, 1))
            mask = rng.random((B, N_POS)) < ratios
            for bi in np.where(~mask.any(axis=1))[0]:
                mask[bi, rng.integers(0, N_POS)] = True
            rows = np.where(mask, N_TEXTURES * model.k, globals_[sel])
            targets = locals_[sel] if model.moe else globals_[sel]
            logits = model(rows, segs[sel], texs[sel])
            loss = T.cross_entropy(logits, targets, mask=mask)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += float(loss.data) * mask.sum()
            count += mask.sum()
            if last:
                _accumulate_expert_loss(logits.data, targets, mask, texs[sel],
                                        expert_loss, expert_count)
        history.losses.append(total / count)
        if log:
            log(f"sampler epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    history.per_expert = {
        tid: float(expert_loss[tid] / expert_count[tid]) if expert_count[tid] else None
        for tid in range(N_TEXTURES)
    }
    return history


def _accumulate_expert_loss(logits, targets, mask, texs, expert_loss, expert_count):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    for tid in range(N_TEXTURES):
        m = mask & (texs == tid)
        expert_loss[tid] += nll[m].sum()
        expert_count[tid] += m.sum()
