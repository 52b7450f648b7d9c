"""Fine-level index inference from quantized coarse features.

The feed-forward predictor maps the quantized top feature grid to bottom-level
patch indices in one encoder-decoder pass, with per-texture classifier heads.
The raster-order autoregressive baseline predicts the same indices one
position at a time (one forward pass per position) and exists to be compared
against on wall-clock and decoded pixel error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import N_TEXTURES
from .nn import adam_step, checkpoint, no_grad
from .nn import tensor as T
from .nn.layers import (
    Conv2d,
    ConvTranspose2d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    RoutedHeads,
    TransformerBlock,
)
from .nn.tensor import Variable
from .vq import C_Z, K_BOT, TokenGrid

AR_MAX_POSITIONS = 128  # supports grids up to 16x8


class _ConvBlock(Module):
    def __init__(self, rng, c_in, c_out, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k=3, stride=stride, dtype=dtype)
        self.ln = LayerNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.ln(self.conv(x)))


class IndexPredictor(Module):
    """Two-level encoder-decoder with a skip, over the top feature grid."""

    def __init__(self, rng, c_z=C_Z, k_bot=K_BOT, widths=(64, 96), dtype=np.float32):
        super().__init__()
        self.c_z = c_z
        self.k_bot = k_bot
        self.widths = tuple(widths)
        self.dtype = dtype
        w1, w2 = self.widths
        self.enc = _ConvBlock(rng, c_z, w1, dtype=dtype)
        self.down = _ConvBlock(rng, w1, w2, stride=2, dtype=dtype)
        self.up = ConvTranspose2d(rng, w2, w1, dtype=dtype)
        self.mix = _ConvBlock(rng, 2 * w1, w1, dtype=dtype)
        self.heads = RoutedHeads(rng, N_TEXTURES, w1, k_bot, dtype=dtype)
        self.trained = False
        self.trunk_forwards = 0

    def __call__(self, feat_top, tex):
        """feat_top: (B, h, w, c_z) Variable; tex: int (B, h, w) patch ids."""
        self.trunk_forwards += 1
        h1 = self.enc(feat_top)
        h2 = self.down(h1)
        h = self.mix(T.concat([self.up(h2), h1], axis=-1))
        return self.heads(h, tex)

    def save(self, path, meta=None):
        m = {"c_z": self.c_z, "k_bot": self.k_bot, "widths": list(self.widths),
             "trained": self.trained}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), c_z=int(meta["c_z"]), k_bot=int(meta["k_bot"]),
                    widths=tuple(meta.get("widths", (64, 96))), dtype=dtype)
        model.load_state_dict(arrays)
        model.trained = bool(meta.get("trained", False))
        return model


def predict_fine_indices(model, feat_top, tex_mask, sample=False, seed=0, temperature=1.0):
    """One trunk pass; greedy argmax per position (or seeded sampling).

    feat_top: (h, w, c_z) quantized top features; tex_mask: (h, w) patch
    texture ids. Returns a TokenGrid over the patch grid.
    """
    if not model.trained:
        raise RuntimeError("index predictor has not been trained")
    tex = np.asarray(tex_mask, dtype=np.int64)
    with no_grad():
        logits = model(Variable(feat_top[None].astype(model.dtype)), tex[None]).data[0]
    if sample:
        rng = np.random.default_rng([98, seed])
        z = logits / max(temperature, 1e-8)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        flat = p.reshape(-1, p.shape[-1])
        idx = np.array([
            np.searchsorted(np.cumsum(row), rng.random(), side="right").clip(0, len(row) - 1)
            for row in flat
        ]).reshape(tex.shape)
    else:
        idx = logits.argmax(axis=-1)
    return TokenGrid(indices=idx.astype(np.int64), texture_ids=tex.copy())


class ArFineSampler(Module):
    """Causal transformer over raster-ordered fine tokens, conditioned on
    the top feature grid (one conditioning token per position)."""

    def __init__(self, rng, c_z=C_Z, k_bot=K_BOT, d=64, heads=4, blocks=2, dtype=np.float32):
        super().__init__()
        self.c_z = c_z
        self.k_bot = k_bot
        self.d = d
        self.n_heads = heads
        self.n_blocks = blocks
        self.dtype = dtype
        self.cond_proj = Linear(rng, c_z, d, dtype=dtype)
        self.tok_emb = Embedding(rng, N_TEXTURES * k_bot, d, dtype=dtype)
        self.pos_emb = Embedding(rng, 2 * AR_MAX_POSITIONS, d, dtype=dtype)
        self.blocks = [TransformerBlock(rng, d, heads, dtype=dtype) for _ in range(blocks)]
        self.ln_f = LayerNorm(d, dtype=dtype)
        self.heads = RoutedHeads(rng, N_TEXTURES, d, k_bot, dtype=dtype)
        self.trained = False
        self.forward_passes = 0

    def _hidden(self, feat_flat, tok_rows):
        """feat_flat: (B, n, c_z) Variable; tok_rows: int (B, m) committed tokens."""
        B, n, _ = feat_flat.shape
        m = tok_rows.shape[1]
        cond = self.cond_proj(feat_flat)
        parts = [cond]
        if m:
            parts.append(self.tok_emb(tok_rows))
        x = T.concat(parts, axis=1) if m else cond
        pos = np.broadcast_to(np.arange(n + m), (B, n + m))
        x = x + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x, attn_mode="causal")
        return self.ln_f(x)

    def save(self, path, meta=None):
        m = {"c_z": self.c_z, "k_bot": self.k_bot, "d": self.d, "heads": self.n_heads,
             "blocks": self.n_blocks, "trained": self.trained}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), c_z=int(meta["c_z"]), k_bot=int(meta["k_bot"]),
                    d=int(meta["d"]), heads=int(meta["heads"]), blocks=int(meta["blocks"]),
                    dtype=dtype)
        model.load_state_dict(arrays)
        model.trained = bool(meta.get("trained", False))
        return model


def autoregressive_fine_sample(model, feat_top, tex_mask, seed=0, temperature=1.0):
    """Raster-order sampling: one forward pass per position."""
    if not model.trained:
        raise RuntimeError("autoregressive baseline has not been trained")
    h, w, _ = feat_top.shape
    n = h * w
    if n > AR_MAX_POSITIONS:
        raise ValueError(f"grid {h}x{w} exceeds AR position budget {AR_MAX_POSITIONS}")
    tex = np.asarray(tex_mask, dtype=np.int64).reshape(-1)
    feat_flat = Variable(feat_top.reshape(1, n, -1).astype(model.dtype))
    rng = np.random.default_rng([99, seed])
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        tok_rows = (tex[:i] * model.k_bot + out[:i]).reshape(1, i)
        with no_grad():
            hdn = model._hidden(feat_flat, tok_rows)
            model.forward_passes += 1
            last = T.narrow(hdn, 1, n - 1 + i, 1)  # hidden that predicts position i
            logits = T.routed_linear(
                last, np.array([[tex[i]]]), model.heads.w, model.heads.b
            ).data[0, 0]
        z = logits / max(temperature, 1e-8)
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        out[i] = np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, len(p) - 1)
    return TokenGrid(indices=out.reshape(h, w), texture_ids=tex.reshape(h, w).copy())


@dataclass
class IndexHistory:
    losses: list = field(default_factory=list)
    per_texture_accuracy: dict = field(default_factory=dict)


def make_fine_dataset(vq_model, records):
    """(quantized top features, ground-truth bottom TokenGrid) pairs."""
    from . import latents
    from .vq import BOT_H, BOT_W, TOP_H, TOP_W

    out = []
    for r in records:
        m_top = latents.latent_texture_mask(r.parsing, r.attrs, TOP_H, TOP_W)
        m_bot = latents.latent_texture_mask(r.parsing, r.attrs, BOT_H, BOT_W)
        feat_top, _ = vq_model.encode_top_tokens(r.image.astype(vq_model.dtype), m_top)
        _, btokens = vq_model.encode_bottom_tokens(r.image.astype(vq_model.dtype), m_bot)
        out.append((feat_top, btokens))
    return out


def train_index_net(model, dataset, epochs, lr=1e-4, batch_size=8, seed=0, log=None):
    """Cross-entropy over per-position partition logits."""
    rng = np.random.default_rng([40, seed])
    feats = np.stack([f for f, _ in dataset]).astype(model.dtype)
    targets = np.stack([t.indices for _, t in dataset])
    texs = np.stack([t.texture_ids for _, t in dataset])
    params = model.parameters()
    history = IndexHistory()
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, batch_size):
            sel = order[i : i + batch_size]
            logits = model(Variable(feats[sel]), texs[sel])
            loss = T.cross_entropy(logits, targets[sel])
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += float(loss.data) * len(sel)
            count += len(sel)
        history.losses.append(total / count)
        if log:
            log(f"indexnet epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    model.trained = True
    return history


def train_ar_baseline(model, dataset, epochs, lr=1e-4, batch_size=8, seed=0, log=None):
    """Teacher-forced training of the raster-order baseline."""
    rng = np.random.default_rng([41, seed])
    feats = np.stack([f for f, _ in dataset]).astype(model.dtype)
    targets = np.stack([t.indices for _, t in dataset])
    texs = np.stack([t.texture_ids for _, t in dataset])
    B_all, h, w, c = feats.shape
    n = h * w
    params = model.parameters()
    history = IndexHistory()
    for epoch in range(epochs):
        order = rng.permutation(B_all)
        total, count = 0.0, 0
        for i in range(0, B_all, batch_size):
            sel = order[i : i + batch_size]
            B = len(sel)
            tgt = targets[sel].reshape(B, n)
            tex = texs[sel].reshape(B, n)
            tok_rows = (tex[:, :-1] * model.k_bot + tgt[:, :-1])
            hdn = model._hidden(Variable(feats[sel].reshape(B, n, c)), tok_rows)
            pred_h = T.narrow(hdn, 1, n - 1, n)  # hiddens predicting positions 0..n-1
            logits = T.routed_linear(pred_h, tex, model.heads.w, model.heads.b)
            loss = T.cross_entropy(logits, tgt)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += float(loss.data) * B
            count += B
        history.losses.append(total / count)
        if log:
            log(f"ar-baseline epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    model.trained = True
    return history


def index_accuracy(model, dataset):
    """Held-out top-1 accuracy of the feed-forward predictor, per texture id."""
    correct = np.zeros(N_TEXTURES)
    total = np.zeros(N_TEXTURES)
    for feat_top, tokens in dataset:
        pred = predict_fine_indices(model, feat_top, tokens.texture_ids)
        ok = pred.indices == tokens.indices
        for tid in range(N_TEXTURES):
            m = tokens.texture_ids == tid
            correct[tid] += ok[m].sum()
            total[tid] += m.sum()
    overall = correct.sum() / max(total.sum(), 1)
    per = {tid: (correct[tid] / total[tid]) if total[tid] else None for tid in range(N_TEXTURES)}
    return overall, per


def bench_fine_methods(ff_model, ar_model, feat_top, tex_mask, repeats=3, seed=0):
    """Wall-clock comparison at a given grid size; returns ms per method."""
    t0 = time.perf_counter()
    for _ in range(repeats):
        predict_fine_indices(ff_model, feat_top, tex_mask)
    ff_ms = (time.perf_counter() - t0) / repeats * 1000.0
    t0 = time.perf_counter()
    for _ in range(repeats):
        autoregressive_fine_sample(ar_model, feat_top, tex_mask, seed=seed)
    ar_ms = (time.perf_counter() - t0) / repeats * 1000.0
    return {"feedforward_ms": ff_ms, "autoregressive_ms": ar_ms,
            "speedup": ar_ms / max(ff_ms, 1e-9)}
