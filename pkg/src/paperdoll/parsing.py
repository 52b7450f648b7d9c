"""Stage one: attribute-conditioned translation of a pose map into a parsing map.

The three garment-shape attributes are embedded per attribute, fused into one
vector, and spatially broadcast onto every encoder level of a U-shaped
encoder-decoder over the one-hot pose grid. Trained with per-pixel
cross-entropy against the corpus parsing maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import N_CLASSES, N_PARTS, SHAPE_CLASS_COUNTS
from .nn import adam_step, checkpoint, no_grad
from .nn import tensor as T
from .nn.layers import Conv2d, ConvTranspose2d, Embedding, LayerNorm, Linear, Module
from .nn.tensor import Variable

EMBED_PER_ATTR = 32
SHAPE_DIM = 64


class ShapeEmbedder(Module):
    """Per-attribute embedding tables fused by a linear projection."""

    def __init__(self, rng, dtype=np.float32):
        super().__init__()
        self.tables = [Embedding(rng, n, EMBED_PER_ATTR, dtype=dtype) for n in SHAPE_CLASS_COUNTS]
        self.fusion = Linear(rng, EMBED_PER_ATTR * len(SHAPE_CLASS_COUNTS), SHAPE_DIM, dtype=dtype)

    def __call__(self, attrs):
        """attrs: int array (B, 3) -> (B, SHAPE_DIM)."""
        attrs = np.asarray(attrs)
        parts = [table(attrs[:, i]) for i, table in enumerate(self.tables)]
        return self.fusion(T.concat(parts, axis=-1))


def broadcast_concat(feature, f_shape):
    """Append f_shape to every spatial position of a (B, h, w, c) feature."""
    B, h, w, _ = feature.shape
    ones = Variable(np.ones((1, h, w, 1), dtype=feature.dtype))
    tiled = T.mul(T.reshape(f_shape, (B, 1, 1, f_shape.shape[-1])), ones)
    return T.concat([feature, tiled], axis=-1)


class _ConvBlock(Module):
    def __init__(self, rng, c_in, c_out, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k=3, stride=stride, dtype=dtype)
        self.ln = LayerNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return T.relu(self.ln(self.conv(x)))


class PoseParsingNet(Module):
    """Four-level U-net over the one-hot pose grid, shape vector at each level."""

    def __init__(self, rng, widths=(24, 32, 48, 64), dtype=np.float32):
        super().__init__()
        self.dtype = dtype
        self.widths = tuple(widths)
        self.embedder = ShapeEmbedder(rng, dtype=dtype)
        chans = [N_PARTS, *widths]
        self.enc = [
            _ConvBlock(rng, chans[i] + SHAPE_DIM, chans[i + 1], stride=2, dtype=dtype)
            for i in range(len(widths))
        ]
        ups, mixes = [], []
        dec_in = widths[-1]
        for skip_c in (*widths[-2::-1], N_PARTS):
            out_c = max(skip_c, 16)
            ups.append(ConvTranspose2d(rng, dec_in, out_c, dtype=dtype))
            mixes.append(_ConvBlock(rng, out_c + skip_c, out_c, dtype=dtype))
            dec_in = out_c
        self.ups = ups
        self.mixes = mixes
        self.head = Conv2d(rng, dec_in, N_CLASSES, k=1, dtype=dtype)

    def __call__(self, pose_onehot, attrs):
        f_shape = self.embedder(attrs)
        h = pose_onehot
        skips = [h]
        for block in self.enc:
            h = block(broadcast_concat(h, f_shape))
            skips.append(h)
        skips.pop()  # bottleneck is not its own skip
        for up, mix in zip(self.ups, self.mixes):
            h = up(h)
            h = mix(T.concat([h, skips.pop()], axis=-1))
        return self.head(h)

    def save(self, path, meta=None):
        m = {"widths": list(self.widths)}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), widths=tuple(meta["widths"]), dtype=dtype)
        model.load_state_dict(arrays)
        return model


def pose_to_onehot(pose, dtype=np.float32):
    return np.eye(N_PARTS, dtype=dtype)[pose]


def predict_parsing_logits(model, pose, attrs):
    """Logits (H, W, L) for one pose and one attribute set."""
    onehot = pose_to_onehot(pose, model.dtype)[None]
    a = np.asarray([attrs.shape_tuple]) if hasattr(attrs, "shape_tuple") else np.asarray([attrs])
    with no_grad():
        logits = model(Variable(onehot), a)
    return logits.data[0]


def predict_parsing(model, pose, attrs):
    """Argmax parsing map (H, W) ints."""
    return predict_parsing_logits(model, pose, attrs).argmax(axis=-1).astype(np.uint8)


@dataclass
class Stage1History:
    losses: list = field(default_factory=list)


def train_stage1(model, records, epochs, lr=1e-4, batch_size=8, seed=0, log=None):
    """Per-pixel cross-entropy training on (pose, shape attrs) -> parsing."""
    if not records:
        raise ValueError("empty corpus")
    rng = np.random.default_rng([20, seed])
    poses = np.stack([pose_to_onehot(r.pose, model.dtype) for r in records])
    labels = np.stack([r.parsing.astype(np.int64) for r in records])
    attrs = np.asarray([r.attrs.shape_tuple for r in records])
    params = model.parameters()
    history = Stage1History()
    n = len(records)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, batch_size):
            sel = order[i : i + batch_size]
            logits = model(Variable(poses[sel]), attrs[sel])
            loss = T.cross_entropy(logits, labels[sel])
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += float(loss.data) * len(sel)
            count += len(sel)
        history.losses.append(total / count)
        if log:
            log(f"stage1 epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    return history


def pixel_accuracy(model, records):
    correct, total = 0, 0
    for r in records:
        pred = predict_parsing(model, r.pose, r.attrs)
        correct += int((pred == r.parsing).sum())
        total += pred.size
    return correct / total
