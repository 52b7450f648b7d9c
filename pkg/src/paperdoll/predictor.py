"""Texture attribute predictor: classifies the texture rendered in a garment
region. Used as the measurement instrument for generated-attribute accuracy
and for the mixture-of-experts ablation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import CLS_LOWER, CLS_UPPER, TEX_SOLID
from .nn import adam_step, checkpoint, no_grad
from .nn import tensor as T
from .nn.layers import Conv2d, LayerNorm, Linear, Module
from .nn.tensor import Variable

N_TEXTURE_CLASSES = 4  # texture ids 1..4 map to logit rows 0..3


class TexturePredictor(Module):
    """Small conv classifier over a garment-masked image crop."""

    def __init__(self, rng, dtype=np.float32):
        super().__init__()
        self.dtype = dtype
        self.conv1 = Conv2d(rng, 4, 24, k=3, stride=2, dtype=dtype)
        self.ln1 = LayerNorm(24, dtype=dtype)
        self.conv2 = Conv2d(rng, 24, 32, k=3, stride=2, dtype=dtype)
        self.ln2 = LayerNorm(32, dtype=dtype)
        self.conv3 = Conv2d(rng, 32, 48, k=3, stride=2, dtype=dtype)
        self.ln3 = LayerNorm(48, dtype=dtype)
        self.fc = Linear(rng, 48, N_TEXTURE_CLASSES, dtype=dtype)
        self.trained = False

    def __call__(self, x):
        h = T.relu(self.ln1(self.conv1(x)))
        h = T.relu(self.ln2(self.conv2(h)))
        h = T.relu(self.ln3(self.conv3(h)))
        return self.fc(T.vmean(h, axis=(1, 2)))

    def save(self, path, meta=None):
        m = {"trained": self.trained}
        m.update(meta or {})
        checkpoint.save(path, self.state_dict(), meta=m)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = checkpoint.load(path)
        model = cls(np.random.default_rng(0), dtype=dtype)
        model.load_state_dict(arrays)
        model.trained = bool(meta.get("trained", False))
        return model


def masked_input(image, region_mask, dtype=np.float32):
    """Zero the image outside the region and append the mask as a channel."""
    m = region_mask.astype(dtype)[..., None]
    return np.concatenate([image.astype(dtype) * m, m], axis=-1)


def predict_texture(model, image, region_mask):
    """(texture id in 1..4, class probabilities) for one garment region."""
    x = masked_input(image, region_mask, model.dtype)[None]
    with no_grad():
        logits = model(Variable(x)).data[0]
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return int(logits.argmax()) + TEX_SOLID, p


def _examples(records):
    xs, ys = [], []
    for r in records:
        for cls, tex in ((CLS_UPPER, r.attrs.upper_texture), (CLS_LOWER, r.attrs.lower_texture)):
            mask = r.parsing == cls
            if mask.sum() < 8:
                continue
            xs.append(masked_input(r.image, mask))
            ys.append(tex - TEX_SOLID)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


@dataclass
class PredictorHistory:
    losses: list = field(default_factory=list)


def train_predictor(model, records, epochs, lr=1e-4, batch_size=8, seed=0, log=None):
    if not records:
        raise ValueError("empty corpus")
    rng = np.random.default_rng([50, seed])
    xs, ys = _examples(records)
    params = model.parameters()
    history = PredictorHistory()
    n = len(xs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, batch_size):
            sel = order[i : i + batch_size]
            logits = model(Variable(xs[sel].astype(model.dtype)))
            loss = T.cross_entropy(logits, ys[sel])
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, lr)
            total += float(loss.data) * len(sel)
            count += len(sel)
        history.losses.append(total / count)
        if log:
            log(f"predictor epoch {epoch + 1}/{epochs} loss {history.losses[-1]:.4f}")
    model.trained = True
    return history


def predictor_accuracy(model, records):
    """(accuracy, confusion matrix) over real garment regions."""
    confusion = np.zeros((N_TEXTURE_CLASSES, N_TEXTURE_CLASSES), dtype=np.int64)
    for r in records:
        for cls, tex in ((CLS_UPPER, r.attrs.upper_texture), (CLS_LOWER, r.attrs.lower_texture)):
            mask = r.parsing == cls
            if mask.sum() < 8:
                continue
            pred, _ = predict_texture(model, r.image, mask)
            confusion[tex - TEX_SOLID, pred - TEX_SOLID] += 1
    total = confusion.sum()
    acc = confusion.trace() / total if total else 0.0
    return acc, confusion
