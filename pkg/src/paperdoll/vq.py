"""Hierarchical texture-aware vector quantization.

Two latent levels over a 64x32 image: a top level at 4x2 with one code vector
per position, and a bottom level at 8x4 whose codes are 2x2 patches, so the
bottom token grid is also 4x2. Codebooks are partitioned by texture id: each
position quantizes only within the partition named by its latent texture mask.
The decoder is split so the bottom feature enters additively halfway through:

    image_hat = d_bot(d_top(feat_top) + feat_bot)

Training is stage-wise: the top autoencoder trains against a zero bottom
feature; the bottom stage then trains the residual encoder, bottom codebook,
and d_bot with every top-level parameter frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import latents
from .nn import adam_step, checkpoint, no_grad
from .nn import tensor as T
from .nn.layers import Conv2d, ConvTranspose2d, LayerNorm, Module
from .nn.tensor import Parameter, Variable

N_PARTITIONS = 5  # texture ids 0..4
C_Z = 32
K_TOP = 32
K_BOT = 64
PATCH = 2
TOP_H, TOP_W = 4, 2
BOT_H, BOT_W = 8, 4


@dataclass
class TokenGrid:
    """Partition-local codebook indices plus the texture id fixing each partition."""

    indices: np.ndarray  # int, MASK = -1 allowed while sampling
    texture_ids: np.ndarray  # same shape

    MASK = -1

    def copy(self):
        return TokenGrid(self.indices.copy(), self.texture_ids.copy())


def quantize_nearest(features, mask, books):
    """Nearest-entry quantization within each position's texture partition.

    features: (h, w, c); mask: (h, w) texture ids; books: (P, K, c).
    Returns (quantized (h, w, c), indices (h, w)). Ties break to the lowest
    index (argmin of exact squared distances).
    """
    h, w, c = features.shape
    if mask.shape != (h, w):
        raise ValueError("mask shape must match feature grid")
    if books.shape[2] != c:
        raise ValueError("codebook entry length must match feature channels")
    out = np.empty_like(features)
    idx = np.empty((h, w), dtype=np.int64)
    flat_f = features.reshape(-1, c)
    flat_m = mask.reshape(-1)
    flat_o = out.reshape(-1, c)
    flat_i = idx.reshape(-1)
    for tid in np.unique(flat_m):
        if not 0 <= tid < books.shape[0]:
            raise ValueError(f"no codebook partition for texture id {tid}")
        part = books[tid]
        if not np.isfinite(part).all():
            raise ValueError(f"codebook partition {tid} has non-finite entries")
        sel = flat_m == tid
        d = ((flat_f[sel][:, None, :] - part[None, :, :]) ** 2).sum(axis=-1)
        best = d.argmin(axis=1)
        flat_i[sel] = best
        flat_o[sel] = part[best]
    return out, idx


def quantize_patch(features, mask, books, patch=PATCH):
    """Quantize non-overlapping 2x2 patches against patch-shaped codes.

    features: (h, w, c) with h, w divisible by `patch`; mask: (h, w) texture
    ids at feature resolution; books: (P, K, patch*patch*c). Each patch's
    partition is the majority texture id over its positions (ties to the
    smaller id). Returns (quantized (h, w, c), TokenGrid over the patch grid).
    """
    h, w, c = features.shape
    if h % patch or w % patch:
        raise ValueError("feature grid must divide into patches")
    ph, pw = h // patch, w // patch
    patch_tex = latents.patch_texture_ids(mask, patch)
    vecs = (
        features.reshape(ph, patch, pw, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(ph, pw, patch * patch * c)
    )
    qvecs, idx = quantize_nearest(vecs, patch_tex, books)
    quant = (
        qvecs.reshape(ph, pw, patch, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, c)
    )
    return quant, TokenGrid(indices=idx, texture_ids=patch_tex)


def codes_to_features(tokens, books, c=C_Z):
    """Look up top-level code vectors for a TokenGrid -> (h, w, c)."""
    flat = tokens.texture_ids * books.shape[1] + tokens.indices
    return books.reshape(-1, books.shape[2])[flat].reshape(*tokens.indices.shape, c)


def patch_codes_to_features(tokens, books, patch=PATCH, c=C_Z):
    """Look up bottom-level patch codes -> (h, w, c) feature grid."""
    ph, pw = tokens.indices.shape
    flat = tokens.texture_ids * books.shape[1] + tokens.indices
    vecs = books.reshape(-1, books.shape[2])[flat]  # (ph, pw, patch*patch*c)
    vecs = vecs.reshape(ph, pw, patch, patch, c)
    return vecs.transpose(0, 2, 1, 3, 4).reshape(ph * patch, pw * patch, c)


def vq_loss(image, image_hat, pre_quant, quantized, beta=0.25):
    """Reconstruction + codebook + commitment terms.

    image/image_hat: Variables (...,3). pre_quant is the encoder output, with
    gradients; quantized is the differentiable codebook gather. The codebook
    term detaches the encoder side; the commitment term detaches the codebook
    side and is scaled by beta.
    """
    recon = T.vmean(T.vabs(image_hat - image))
    diff_cb = quantized - pre_quant.detach()
    codebook_term = T.vmean(diff_cb * diff_cb)
    diff_cm = pre_quant - quantized.detach()
    commit_term = T.vmean(diff_cm * diff_cm) * beta
    total = recon + codebook_term + commit_term
    breakdown = {
        "recon": float(recon.data),
        "codebook": float(codebook_term.data),
        "commit": float(commit_term.data),
        "total": float(total.data),
    }
    return total, breakdown


class _ConvBlock(Module):
    def __init__(self, rng, c_in, c_out, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k=3, stride=stride, dtype=dtype)
        self.ln = LayerNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.ln(self.conv(x)))


class TopEncoder(Module):
    """64x32x3 -> 4x2xC_Z via four stride-2 convolutions."""

    def __init__(self, rng, c_z=C_Z, dtype=np.float32):
        super().__init__()
        self.blocks = [
            _ConvBlock(rng, 3, 32, stride=2, dtype=dtype),
            _ConvBlock(rng, 32, 48, stride=2, dtype=dtype),
            _ConvBlock(rng, 48, 64, stride=2, dtype=dtype),
            _ConvBlock(rng, 64, 64, stride=2, dtype=dtype),
        ]
        self.proj = Conv2d(rng, 64, c_z, k=1, dtype=dtype)

    def __call__(self, x):
        h = x
        for b in self.blocks:
            h = b(h)
        return self.proj(h)


class BottomEncoder(Module):
    """64x32x3 -> 8x4xC_Z via three stride-2 convolutions."""

    def __init__(self, rng, c_z=C_Z, dtype=np.float32):
        super().__init__()
        self.blocks = [
            _ConvBlock(rng, 3, 32, stride=2, dtype=dtype),
            _ConvBlock(rng, 32, 48, stride=2, dtype=dtype),
            _ConvBlock(rng, 48, 64, stride=2, dtype=dtype),
        ]
        self.proj = Conv2d(rng, 64, c_z, k=1, dtype=dtype)

    def __call__(self, x):
        h = x
        for b in self.blocks:
            h = b(h)
        return self.proj(h)


class TopDecoder(Module):
    """4x2xC_Z -> 8x4xC_Z; output lives in the bottom-feature space."""

    def __init__(self, rng, c_z=C_Z, dtype=np.float32):
        super().__init__()
        self.block = _ConvBlock(rng, c_z, 64, dtype=dtype)
        self.up = ConvTranspose2d(rng, 64, 64, dtype=dtype)
        self.out = Conv2d(rng, 64, c_z, k=3, dtype=dtype)

    def __call__(self, x):
        return self.out(self.up(self.block(x)))


class BottomDecoder(Module):
    """8x4xC_Z -> 64x32x3 image in [0, 1] (sigmoid output)."""

    def __init__(self, rng, c_z=C_Z, dtype=np.float32):
        super().__init__()
        self.block0 = _ConvBlock(rng, c_z, 64, dtype=dtype)
        self.up1 = ConvTranspose2d(rng, 64, 48, dtype=dtype)
        self.block1 = _ConvBlock(rng, 48, 48, dtype=dtype)
        self.up2 = ConvTranspose2d(rng, 48, 32, dtype=dtype)
        self.block2 = _ConvBlock(rng, 32, 32, dtype=dtype)
        self.up3 = ConvTranspose2d(rng, 32, 24, dtype=dtype)
        self.block3 = _ConvBlock(rng, 24, 24, dtype=dtype)
        self.proj = Conv2d(rng, 24, 3, k=1, dtype=dtype)

    def __call__(self, x):
        h = self.block0(x)
        h = self.block1(self.up1(h))
        h = self.block2(self.up2(h))
        h = self.block3(self.up3(h))
        return T.sigmoid(self.proj(h))


class HierVq(Module):
    """Two-level texture-aware VQ autoencoder with a split decoder."""

    def __init__(self, rng, c_z=C_Z, k_top=K_TOP, k_bot=K_BOT, dtype=np.float32):
        super().__init__()
        self.c_z = c_z
        self.k_top = k_top
        self.k_bot = k_bot
        self.dtype = dtype
        self.e_top = TopEncoder(rng, c_z, dtype)
        self.d_top = TopDecoder(rng, c_z, dtype)
        self.e_bot = BottomEncoder(rng, c_z, dtype)
        self.d_bot = BottomDecoder(rng, c_z, dtype)
        self.books_top = Parameter(
            (rng.standard_normal((N_PARTITIONS, k_top, c_z)) * 0.5).astype(dtype), name="books_top"
        )
        self.books_bot = Parameter(
            (rng.standard_normal((N_PARTITIONS, k_bot, PATCH * PATCH * c_z)) * 0.5).astype(dtype),
            name="books_bot",
        )
        self.top_frozen = False

    # -- inference ----------------------------------------------------------

    def encode_top_tokens(self, image, mask_top):
        with no_grad():
            z = self.e_top(Variable(image[None].astype(self.dtype))).data[0]
        quant, idx = quantize_nearest(z, mask_top, self.books_top.data)
        return quant, TokenGrid(indices=idx, texture_ids=mask_top.copy())

    def encode_bottom_tokens(self, image, mask_bot):
        with no_grad():
            z = self.e_bot(Variable(image[None].astype(self.dtype))).data[0]
        return quantize_patch(z, mask_bot, self.books_bot.data)

    def decode(self, feat_top, feat_bot=None):
        """Eq-structured decode: d_bot(d_top(feat_top) + feat_bot).

        The top-only reconstruction is exactly this call with a zero bottom
        feature, so the residual identity holds bitwise by construction.
        """
        ft = feat_top if feat_top.ndim == 4 else feat_top[None]
        if feat_bot is None:
            fb = np.zeros((ft.shape[0], BOT_H, BOT_W, self.c_z), dtype=self.dtype)
        else:
            fb = feat_bot if feat_bot.ndim == 4 else feat_bot[None]
        with no_grad():
            mid = self.d_top(Variable(ft.astype(self.dtype)))
            out = self.d_bot(mid + Variable(fb.astype(self.dtype)))
        img = out.data
        return img if feat_top.ndim == 4 else img[0]

    def reconstruct(self, image, mask_top, mask_bot, use_bottom=True):
        feat_top, _ = self.encode_top_tokens(image, mask_top)
        feat_bot = None
        if use_bottom:
            feat_bot, _ = self.encode_bottom_tokens(image, mask_bot)
        return self.decode(feat_top, feat_bot)

    # -- persistence ---------------------------------------------------------

    def save(self, path, meta=None):
        m = {"c_z": self.c_z, "k_top": self.k_top, "k_bot": self.k_bot,
             "top_frozen": self.top_frozen}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), c_z=int(meta["c_z"]),
                    k_top=int(meta["k_top"]), k_bot=int(meta["k_bot"]), dtype=dtype)
        model.load_state_dict(arrays)
        model.top_frozen = bool(meta.get("top_frozen", False))
        return model


# -- training ----------------------------------------------------------------


@dataclass
class StageHistory:
    losses: list = field(default_factory=list)
    usage: dict = field(default_factory=dict)

    def dead_entries(self):
        return {
            tid: [int(i) for i in np.where(counts == 0)[0]]
            for tid, counts in self.usage.items()
        }


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _top_masks(records):
    return np.stack(
        [latents.latent_texture_mask(r.parsing, r.attrs, TOP_H, TOP_W) for r in records]
    )


def _bot_masks(records):
    return np.stack(
        [latents.latent_texture_mask(r.parsing, r.attrs, BOT_H, BOT_W) for r in records]
    )


def _gather_codes(books_param, tex_ids, indices, k):
    """Differentiable codebook lookup for a batch of token grids."""
    flat = tex_ids * k + indices
    table = T.reshape(books_param, (books_param.shape[0] * k, books_param.shape[2]))
    return T.gather_rows(table, flat)


def _init_books_from_features(books, feats, masks, rng):
    """Seed each partition with actual encoder outputs (plus a little noise).

    Random codebooks rarely fall near the encoder's output manifold, so only a
    couple of entries ever win the nearest-neighbor race and the rest stay
    dead forever (there is no re-initialization during training). Sampling
    real feature vectors gives every entry a fighting chance from step one.
    """
    k, dim = books.data.shape[1], books.data.shape[2]
    flat_f = feats.reshape(-1, dim)
    flat_m = masks.reshape(-1)
    pool_all = flat_f
    for tid in range(books.data.shape[0]):
        pool = flat_f[flat_m == tid]
        if len(pool) == 0:
            pool = pool_all
        sel = rng.integers(0, len(pool), size=k)
        noise = rng.standard_normal((k, dim)) * 0.01 * max(float(pool.std()), 1e-3)
        books.data[tid] = (pool[sel] + noise).astype(books.data.dtype)


def train_top_stage(model, records, epochs, lr=1e-4, batch_size=8, beta=0.25, seed=0,
                    log=None):
    """Stage one: train e_top, d_top, d_bot, and the top codebook."""
    rng = np.random.default_rng([10, seed])
    images = np.stack([r.image for r in records]).astype(model.dtype)
    masks = _top_masks(records)
    with no_grad():
        warm = min(len(records), 128)
        z_warm = model.e_top(Variable(images[:warm])).data
    _init_books_from_features(model.books_top, z_warm, masks[:warm], rng)
    params = (
        model.e_top.parameters()
        + model.d_top.parameters()
        + model.d_bot.parameters()
        + [model.books_top]
    )
    history = StageHistory()
    usage = np.zeros((N_PARTITIONS, model.k_top), dtype=np.int64)
    for epoch in range(epochs):
        total, count = 0.0, 0
        last_epoch = epoch == epochs - 1
        if last_epoch:
            usage[:] = 0
        for sel in _batches(len(records), batch_size, rng):
            imgs = Variable(images[sel])
            m = masks[sel]
            z = model.e_top(imgs)
            zq = np.empty_like(z.data)
            idx = np.empty(m.shape, dtype=np.int64)
            for bi in range(len(sel)):
                zq[bi], idx[bi] = quantize_nearest(z.data[bi], m[bi], model.books_top.data)
            if last_epoch:
                np.add.at(usage, (m.reshape(-1), idx.reshape(-1)), 1)
            zq_var = _gather_codes(model.books_top, m, idx, model.k_top)
            st = T.straight_through(z, zq_var)
            img_hat = model.d_bot(model.d_top(st) + Variable(
                np.zeros((len(sel), BOT_H, BOT_W, model.c_z), dtype=model.dtype)))
            loss, parts = vq_loss(imgs, img_hat, z, zq_var, beta=beta)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += parts["total"] * len(sel)
            count += len(sel)
        history.losses.append(total / count)
        if log:
            log(f"vq top epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    history.usage = {tid: usage[tid].copy() for tid in range(N_PARTITIONS)}
    model.top_frozen = True
    return history


def train_bottom_stage(model, records, epochs, lr=1e-4, batch_size=8, beta=0.25, seed=0,
                       log=None):
    """Stage two: train e_bot, d_bot, and the bottom codebook; top frozen."""
    if not model.top_frozen:
        raise RuntimeError("top stage must be trained and frozen first")
    rng = np.random.default_rng([11, seed])
    images = np.stack([r.image for r in records]).astype(model.dtype)
    masks_top = _top_masks(records)
    masks_bot = _bot_masks(records)

    with no_grad():
        warm = min(len(records), 128)
        zb = model.e_bot(Variable(images[:warm])).data
    B, bh, bw, c = zb.shape
    patch_vecs = (
        zb.reshape(B, bh // PATCH, PATCH, bw // PATCH, PATCH, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(B, bh // PATCH, bw // PATCH, PATCH * PATCH * c)
    )
    patch_tex = np.stack([latents.patch_texture_ids(m) for m in masks_bot[:warm]])
    _init_books_from_features(model.books_bot, patch_vecs, patch_tex, rng)

    # e_top and d_top are frozen: precompute the mid-decoder activation once.
    with no_grad():
        mids = []
        for i in range(0, len(records), 32):
            z = model.e_top(Variable(images[i : i + 32]))
            zq = np.empty_like(z.data)
            for bi in range(z.data.shape[0]):
                zq[bi], _ = quantize_nearest(z.data[bi], masks_top[i + bi], model.books_top.data)
            mids.append(model.d_top(Variable(zq)).data)
        mids = np.concatenate(mids, axis=0)

    params = model.e_bot.parameters() + model.d_bot.parameters() + [model.books_bot]
    history = StageHistory()
    usage = np.zeros((N_PARTITIONS, model.k_bot), dtype=np.int64)
    for epoch in range(epochs):
        total, count = 0.0, 0
        last_epoch = epoch == epochs - 1
        if last_epoch:
            usage[:] = 0
        for sel in _batches(len(records), batch_size, rng):
            imgs = Variable(images[sel])
            z = model.e_bot(imgs)
            zq = np.empty_like(z.data)
            pidx = np.empty((len(sel), TOP_H, TOP_W), dtype=np.int64)
            ptex = np.empty((len(sel), TOP_H, TOP_W), dtype=np.int64)
            for bi in range(len(sel)):
                q, tokens = quantize_patch(z.data[bi], masks_bot[sel[bi]], model.books_bot.data)
                zq[bi] = q
                pidx[bi] = tokens.indices
                ptex[bi] = tokens.texture_ids
            if last_epoch:
                np.add.at(usage, (ptex.reshape(-1), pidx.reshape(-1)), 1)
            zq_patch = _gather_codes(model.books_bot, ptex, pidx, model.k_bot)  # (B,4,2,4c)
            z_patchified = _patchify(z)
            st_patch = T.straight_through(z_patchified, zq_patch)
            st = _unpatchify(st_patch, model.c_z)
            img_hat = model.d_bot(Variable(mids[sel]) + st)
            loss, parts = vq_loss(imgs, img_hat, z_patchified, zq_patch, beta=beta)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += parts["total"] * len(sel)
            count += len(sel)
        history.losses.append(total / count)
        if log:
            log(f"vq bottom epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    history.usage = {tid: usage[tid].copy() for tid in range(N_PARTITIONS)}
    return history


def _patchify(z, patch=PATCH):
    """(B, h, w, c) -> (B, h/p, w/p, p*p*c) without leaving the tape."""
    B, h, w, c = z.shape
    z5 = T.reshape(z, (B, h // patch, patch, w // patch, patch, c))
    z5 = T.transpose(z5, (0, 1, 3, 2, 4, 5))
    return T.reshape(z5, (B, h // patch, w // patch, patch * patch * c))


def _unpatchify(zp, c, patch=PATCH):
    B, ph, pw, _ = zp.shape
    z5 = T.reshape(zp, (B, ph, pw, patch, patch, c))
    z5 = T.transpose(z5, (0, 1, 3, 2, 4, 5))
    return T.reshape(z5, (B, ph * patch, pw * patch, c))


def usage_histograms(model, records):
    """Per-partition code usage over a corpus, for both levels."""
    top = np.zeros((N_PARTITIONS, model.k_top), dtype=np.int64)
    bot = np.zeros((N_PARTITIONS, model.k_bot), dtype=np.int64)
    for r in records:
        m_top = latents.latent_texture_mask(r.parsing, r.attrs, TOP_H, TOP_W)
        m_bot = latents.latent_texture_mask(r.parsing, r.attrs, BOT_H, BOT_W)
        _, tokens = model.encode_top_tokens(r.image.astype(model.dtype), m_top)
        np.add.at(top, (tokens.texture_ids.reshape(-1), tokens.indices.reshape(-1)), 1)
        _, btokens = model.encode_bottom_tokens(r.image.astype(model.dtype), m_bot)
        np.add.at(bot, (btokens.texture_ids.reshape(-1), btokens.indices.reshape(-1)), 1)
    return {"top": top, "bottom": bot}
