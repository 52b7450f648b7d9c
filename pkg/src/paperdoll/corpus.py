"""Procedural paper-doll corpus: (pose, parsing, attributes, image) tuples.

Every sample is a pure function of (seed, attribute spec). Geometry, attribute
draws, and texture parameters come from three independent seeded streams, so
the same seed with different attributes yields the same skeleton — which is
what the attribute-sensitivity probes rely on.

Canvas is 64x32 (divisible by 16). Pose parts: 0 background, 1 head, 2 torso,
3/4 left/right arm, 5/6 left/right leg. Parsing classes: 0 background, 1 head,
2 skin, 3 upper garment, 4 lower garment, 5 shoes. Texture ids: 0 none,
1 solid, 2 stripe, 3 plaid, 4 dots.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

H, W = 64, 32

PART_BACKGROUND = 0
PART_HEAD = 1
PART_TORSO = 2
PART_LEFT_ARM = 3
PART_RIGHT_ARM = 4
PART_LEFT_LEG = 5
PART_RIGHT_LEG = 6
N_PARTS = 7

CLS_BACKGROUND = 0
CLS_HEAD = 1
CLS_SKIN = 2
CLS_UPPER = 3
CLS_LOWER = 4
CLS_SHOES = 5
N_CLASSES = 6

TEX_NONE = 0
TEX_SOLID = 1
TEX_STRIPE = 2
TEX_PLAID = 3
TEX_DOTS = 4
N_TEXTURES = 5  # including "none"
TEXTURE_NAMES = {TEX_SOLID: "solid", TEX_STRIPE: "stripe", TEX_PLAID: "plaid", TEX_DOTS: "dots"}

SHAPE_CLASS_COUNTS = (3, 2, 2)  # sleeve_length, lower_length, neckline

BACKGROUND_COLOR = np.array([0.94, 0.94, 0.96])
SKIN_TONES = [(0.98, 0.85, 0.74), (0.87, 0.68, 0.54), (0.62, 0.45, 0.35)]
HAIR_COLORS = [(0.20, 0.15, 0.10), (0.45, 0.30, 0.15), (0.10, 0.10, 0.12), (0.85, 0.75, 0.40)]
SHOE_COLORS = [(0.15, 0.15, 0.18), (0.40, 0.25, 0.15), (0.55, 0.10, 0.10)]
GARMENT_PALETTE = [
    ((0.85, 0.20, 0.20), (0.95, 0.95, 0.90)),
    ((0.15, 0.30, 0.70), (0.90, 0.85, 0.75)),
    ((0.10, 0.50, 0.30), (0.95, 0.90, 0.55)),
    ((0.50, 0.25, 0.60), (0.92, 0.90, 0.95)),
    ((0.90, 0.60, 0.15), (0.25, 0.20, 0.20)),
]

# Period 6 does not divide the 16-px latent cell, so adjacent cells see
# different crops of the same pattern; this is what makes the coarse codebook
# genuinely lossy and the fine level worth its residual. Phases are kept to
# two values: phase variety multiplies the global alignments the sampler must
# coordinate across cells without making the coarse level any more lossy.
# Plaid checkers and dot disks at fine periods are cheaper for an L1-trained
# decoder to blur away than to render (no perceptual/adversarial terms here),
# so those kinds draw from coarse periods only.
TEXTURE_PERIODS = {
    TEX_SOLID: [4, 6, 8],
    TEX_STRIPE: [4, 6, 8],
    TEX_PLAID: [8],
    TEX_DOTS: [8, 12],
}
TEXTURE_PHASES = [0, 1]

DEFAULT_TEXTURE_WEIGHTS = {TEX_SOLID: 0.45, TEX_STRIPE: 0.30, TEX_PLAID: 0.05, TEX_DOTS: 0.20}


@dataclass(frozen=True)
class AttributeSet:
    sleeve_length: int  # 0 sleeveless, 1 short, 2 long
    lower_length: int  # 0 shorts, 1 trousers
    neckline: int  # 0 crew, 1 v
    upper_texture: int  # 1..4
    lower_texture: int  # 1..4

    def __post_init__(self):
        for value, count, name in zip(
            (self.sleeve_length, self.lower_length, self.neckline),
            SHAPE_CLASS_COUNTS,
            ("sleeve_length", "lower_length", "neckline"),
        ):
            if not 0 <= value < count:
                raise ValueError(f"{name}={value} outside [0, {count})")
        for value, name in ((self.upper_texture, "upper_texture"), (self.lower_texture, "lower_texture")):
            if not TEX_SOLID <= value <= TEX_DOTS:
                raise ValueError(f"{name}={value} outside [1, 4]")

    @property
    def shape_tuple(self):
        return (self.sleeve_length, self.lower_length, self.neckline)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(d[k]) for k in (
            "sleeve_length", "lower_length", "neckline", "upper_texture", "lower_texture")})


@dataclass(frozen=True)
class TextureParams:
    color_a: tuple
    color_b: tuple
    period: int
    phase: int


@dataclass
class Sample:
    seed: int
    pose: np.ndarray  # (H, W) uint8 part ids
    parsing: np.ndarray  # (H, W) uint8 class ids
    attrs: AttributeSet
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    upper_params: TextureParams
    lower_params: TextureParams


def render_texture(kind, params, region_mask, base=None):
    """Render one texture over the masked region of a full canvas.

    Patterns are anchored to canvas coordinates, so re-rendering over any
    sub-region reproduces the same pixels. Pixels outside the mask keep the
    values of `base` (zeros if no base given).
    """
    if params.period < 2:
        raise ValueError(f"texture period must be >= 2, got {params.period}")
    h, w = region_mask.shape
    out = np.zeros((h, w, 3)) if base is None else np.array(base, copy=True)
    a = np.asarray(params.color_a)
    b = np.asarray(params.color_b)
    p = params.period
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if kind == TEX_SOLID:
        patch = np.broadcast_to(a, (h, w, 3)).copy()
    elif kind == TEX_STRIPE:
        parity = ((rows + params.phase) // p) % 2
        patch = np.where(np.broadcast_to(parity[..., None], (h, w, 1)) == 0, a, b)
    elif kind == TEX_PLAID:
        pr = ((rows + params.phase) // p) % 2
        pc = ((cols + params.phase) // p) % 2
        pr = np.broadcast_to(pr, (h, w))
        pc = np.broadcast_to(pc, (h, w))
        patch = np.empty((h, w, 3))
        patch[(pr == 0) & (pc == 0)] = a
        patch[(pr == 1) ^ (pc == 1)] = b
        patch[(pr == 1) & (pc == 1)] = 0.5 * (a + b)
    elif kind == TEX_DOTS:
        dr = ((rows - params.phase) % p) - p / 2.0
        dc = ((cols - params.phase) % p) - p / 2.0
        dist2 = np.broadcast_to(dr**2 + dc**2, (h, w))
        inside = dist2 <= (p / 4.0) ** 2
        patch = np.where(inside[..., None], b, a)
    else:
        raise ValueError(f"unknown texture kind: {kind}")
    out[region_mask] = patch[region_mask]
    return out


@dataclass(frozen=True)
class _Skeleton:
    head_row: int
    head_col: int
    head_r: int
    torso_top: int
    torso_bottom: int
    half_width: int
    arm_top: int
    arm_bottom: int
    leg_bottom: int
    center: int


def _draw_skeleton(rng):
    # The figure is deliberately chunky: garments must win the majority vote
    # in 16x16 pooling blocks, or the latent texture masks degenerate to
    # background everywhere.
    hw = 12
    head_r = int(rng.integers(5, 7))
    torso_bottom = int(29 + rng.integers(0, 3))
    arm_bottom = int(torso_bottom - 3 + rng.integers(0, 4))
    leg_bottom = int(57 + rng.integers(0, 3))
    return _Skeleton(
        head_row=6,
        head_col=W // 2,
        head_r=head_r,
        torso_top=12,
        torso_bottom=torso_bottom,
        half_width=hw,
        arm_top=13,
        arm_bottom=arm_bottom,
        leg_bottom=leg_bottom,
        center=W // 2,
    )


def _render_pose(sk):
    pose = np.zeros((H, W), dtype=np.uint8)
    rr = np.arange(H)[:, None]
    cc = np.arange(W)[None, :]
    head = (rr - sk.head_row) ** 2 + (cc - sk.head_col) ** 2 <= sk.head_r**2
    pose[head] = PART_HEAD
    cx, hw = sk.center, sk.half_width
    pose[sk.torso_top : sk.torso_bottom + 1, cx - hw : cx + hw + 1] = PART_TORSO
    pose[sk.arm_top : sk.arm_bottom + 1, cx - hw - 3 : cx - hw - 1] = PART_LEFT_ARM
    pose[sk.arm_top : sk.arm_bottom + 1, cx + hw + 2 : cx + hw + 4] = PART_RIGHT_ARM
    leg_top = sk.torso_bottom + 1
    pose[leg_top : sk.leg_bottom + 1, cx - hw - 2 : cx - 1] = PART_LEFT_LEG
    pose[leg_top : sk.leg_bottom + 1, cx + 2 : cx + hw + 3] = PART_RIGHT_LEG
    return pose


def _derive_parsing(pose, sk, attrs):
    parsing = np.zeros((H, W), dtype=np.uint8)
    parsing[pose == PART_HEAD] = CLS_HEAD
    parsing[pose == PART_TORSO] = CLS_UPPER

    cx = sk.center
    if attrs.neckline == 0:  # crew: shallow notch
        notch = np.zeros((H, W), dtype=bool)
        notch[sk.torso_top, cx - 1 : cx + 2] = True
    else:  # v: three-row wedge
        notch = np.zeros((H, W), dtype=bool)
        notch[sk.torso_top, cx - 2 : cx + 3] = True
        notch[sk.torso_top + 1, cx - 1 : cx + 2] = True
        notch[sk.torso_top + 2, cx] = True
    parsing[notch & (pose == PART_TORSO)] = CLS_SKIN

    for part in (PART_LEFT_ARM, PART_RIGHT_ARM):
        arm = pose == part
        parsing[arm] = CLS_SKIN
        if attrs.sleeve_length > 0:
            arm_len = sk.arm_bottom - sk.arm_top + 1
            if attrs.sleeve_length == 1:
                covered = int(round(0.45 * arm_len))
            else:
                covered = arm_len - 1  # long: all but the hand row
            sleeve = arm.copy()
            sleeve[sk.arm_top + covered :, :] = False
            parsing[sleeve] = CLS_UPPER

    leg_top = sk.torso_bottom + 1
    leg_len = sk.leg_bottom - leg_top + 1
    for part in (PART_LEFT_LEG, PART_RIGHT_LEG):
        leg = pose == part
        parsing[leg] = CLS_SKIN
        if attrs.lower_length == 0:
            covered = int(round(0.55 * leg_len))  # shorts: below the pooling
            # majority line for the hip block, still < 60% of the leg
        else:
            covered = leg_len - 2  # trousers reach the shoes
        garment = leg.copy()
        garment[leg_top + covered :, :] = False
        parsing[garment] = CLS_LOWER
        shoes = leg.copy()
        shoes[: sk.leg_bottom - 1, :] = False
        parsing[shoes] = CLS_SHOES
    return parsing


def _draw_texture_params(rng, kind):
    pair = GARMENT_PALETTE[int(rng.integers(0, len(GARMENT_PALETTE)))]
    period = int(rng.choice(TEXTURE_PERIODS[kind]))
    phase = int(rng.choice(TEXTURE_PHASES))
    return TextureParams(color_a=pair[0], color_b=pair[1], period=period, phase=phase)


def _render_image(pose, parsing, attrs, upper_params, lower_params, rng):
    img = np.broadcast_to(BACKGROUND_COLOR, (H, W, 3)).copy()
    skin = np.asarray(SKIN_TONES[int(rng.integers(0, len(SKIN_TONES)))])
    hair = np.asarray(HAIR_COLORS[int(rng.integers(0, len(HAIR_COLORS)))])
    shoe = np.asarray(SHOE_COLORS[int(rng.integers(0, len(SHOE_COLORS)))])

    img[parsing == CLS_SKIN] = skin
    head = parsing == CLS_HEAD
    img[head] = skin
    head_rows = np.where(head.any(axis=1))[0]
    if head_rows.size:
        cap = head.copy()
        cap[head_rows[0] + (head_rows[-1] - head_rows[0]) // 2 :, :] = False
        img[cap] = hair
    img = render_texture(attrs.upper_texture, upper_params, parsing == CLS_UPPER, base=img)
    img = render_texture(attrs.lower_texture, lower_params, parsing == CLS_LOWER, base=img)
    img[parsing == CLS_SHOES] = shoe
    return img


def _draw_attrs(rng, weights=None):
    w = _normalized_weights(weights)
    texture_ids = np.array(sorted(w))
    probs = np.array([w[t] for t in texture_ids])
    return AttributeSet(
        sleeve_length=int(rng.integers(0, 3)),
        lower_length=int(rng.integers(0, 2)),
        neckline=int(rng.integers(0, 2)),
        upper_texture=int(rng.choice(texture_ids, p=probs)),
        lower_texture=int(rng.choice(texture_ids, p=probs)),
    )


def _normalized_weights(weights):
    w = dict(DEFAULT_TEXTURE_WEIGHTS)
    if weights:
        w.update({int(k): float(v) for k, v in weights.items()})
    total = sum(w.values())
    return {k: v / total for k, v in w.items()}


def gen_sample(seed, spec=None, weights=None):
    """Generate one sample deterministically from (seed, spec).

    With `spec` absent, attributes are drawn from a seed-derived stream using
    the texture `weights`. Geometry and texture parameters come from their own
    streams, so the skeleton does not depend on the attributes.
    """
    rng_attrs = np.random.default_rng([1, seed])
    rng_geom = np.random.default_rng([2, seed])
    rng_tex = np.random.default_rng([3, seed])
    attrs = spec if spec is not None else _draw_attrs(rng_attrs, weights)
    sk = _draw_skeleton(rng_geom)
    pose = _render_pose(sk)
    parsing = _derive_parsing(pose, sk, attrs)
    upper_params = _draw_texture_params(rng_tex, attrs.upper_texture)
    lower_params = _draw_texture_params(rng_tex, attrs.lower_texture)
    image = _render_image(pose, parsing, attrs, upper_params, lower_params, rng_geom)
    return Sample(
        seed=seed,
        pose=pose,
        parsing=parsing,
        attrs=attrs,
        image=image,
        upper_params=upper_params,
        lower_params=lower_params,
    )


# -- on-disk corpus ----------------------------------------------------------


def _save_label_png(path, grid):
    Image.fromarray(grid.astype(np.uint8), mode="L").save(path)


def _save_image_png(path, img):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def image_to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def dataset_build(root, n, seed, weights=None):
    """Write an n-sample corpus with a seeded 90/10 train/test split."""
    if n < 20:
        raise ValueError(f"corpus needs n >= 20, got {n}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng([0, seed])
    sample_seeds = [int(s) for s in master.integers(0, 2**63 - 1, size=n)]
    ids = [f"s{i:05d}" for i in range(n)]
    order = master.permutation(n)
    n_train = int(round(n * 0.9))
    split = {}
    for rank, idx in enumerate(order):
        split[ids[idx]] = "train" if rank < n_train else "test"

    norm_weights = _normalized_weights(weights)
    for i, sid in enumerate(ids):
        sample = gen_sample(sample_seeds[i], weights=norm_weights)
        d = root / split[sid] / sid
        d.mkdir(parents=True, exist_ok=True)
        _save_image_png(d / "image.png", sample.image)
        _save_label_png(d / "pose.png", sample.pose)
        _save_label_png(d / "parsing.png", sample.parsing)
        (d / "attrs.json").write_text(json.dumps(sample.attrs.to_dict(), sort_keys=True))

    manifest = {
        "n": n,
        "seed": seed,
        "weights": {str(k): v for k, v in norm_weights.items()},
        "ids": ids,
        "split": split,
        "sample_seeds": sample_seeds,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


@dataclass
class Record:
    sid: str
    split: str
    pose: np.ndarray
    parsing: np.ndarray
    attrs: AttributeSet
    image: np.ndarray


def load_corpus(root, split=None):
    """Load corpus records; images as float32 in [0, 1]."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    records = []
    for sid in manifest["ids"]:
        s = manifest["split"][sid]
        if split is not None and s != split:
            continue
        d = root / s / sid
        pose = np.asarray(Image.open(d / "pose.png"))
        parsing = np.asarray(Image.open(d / "parsing.png"))
        attrs = AttributeSet.from_dict(json.loads((d / "attrs.json").read_text()))
        image = np.asarray(Image.open(d / "image.png")).astype(np.float32) / 255.0
        records.append(Record(sid=sid, split=s, pose=pose, parsing=parsing, attrs=attrs, image=image))
    return records
