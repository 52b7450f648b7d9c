"""End-to-end orchestration: configuration, stage-wise training drivers,
text-to-image generation with full provenance, and the ablation harness.

Generation flow: shape text -> attributes -> parsing (stage one) -> condition
tokens -> coarse index sampling -> codebook lookup -> fine index prediction ->
split-decoder reconstruction. Every seed and intermediate needed to reproduce
the image bit-exactly is recorded in the provenance record.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import corpus, indexnet, latents, parsing, predictor, sampler, textattr, vq
from .corpus import CLS_UPPER, N_CLASSES, AttributeSet
from .vq import BOT_H, BOT_W, TOP_H, TOP_W

PROVENANCE_VERSION = 1


@dataclass
class PipelineConfig:
    height: int = 64
    width: int = 32
    c_z: int = 32
    k_top: int = 32
    k_bot: int = 64
    n_textures: int = 5
    n_classes: int = 6
    sampler_dim: int = 128
    sampler_heads: int = 4
    sampler_blocks: int = 4
    diffusion_steps: int = 8
    temperature: float = 1.0
    commit_policy: str = "confidence"
    learning_rate: float = 1e-4
    batch_size: int = 8
    beta: float = 0.25
    epochs_stage1: int = 12
    epochs_vq_top: int = 30
    epochs_vq_bottom: int = 20
    epochs_sampler: int = 40
    epochs_indexnet: int = 20
    epochs_ar_baseline: int = 20
    epochs_predictor: int = 40
    predictor_lr: float = 1e-3  # eval instrument, not a pipeline stage
    seed: int = 0
    corpus_n: int = 1000
    corpus_seed: int = 77
    texture_weights: dict = field(
        default_factory=lambda: {str(k): v for k, v in corpus.DEFAULT_TEXTURE_WEIGHTS.items()}
    )
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError("image dims must be divisible by 16")
        for name in ("c_z", "k_top", "k_bot", "n_textures", "n_classes",
                     "diffusion_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def from_file(cls, path):
        return cls.from_json(Path(path).read_text())


CHECKPOINT_FILES = {
    "stage1": "stage1.ckpt",
    "vq_top": "vq_top.ckpt",
    "vq": "vq.ckpt",
    "sampler": "sampler.ckpt",
    "sampler_baseline": "sampler_baseline.ckpt",
    "indexnet": "indexnet.ckpt",
    "ar_baseline": "ar_baseline.ckpt",
    "predictor": "predictor.ckpt",
}


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class ModelBundle:
    stage1: parsing.PoseParsingNet
    vq: vq.HierVq
    sampler: sampler.MoeSampler
    indexnet: indexnet.IndexPredictor
    checkpoint_dir: str = ""
    hashes: dict = field(default_factory=dict)

    @classmethod
    def load(cls, checkpoint_dir):
        d = Path(checkpoint_dir)
        paths = {}
        for key in ("stage1", "vq", "sampler", "indexnet"):
            p = d / CHECKPOINT_FILES[key]
            if not p.exists():
                raise MissingCheckpoint(f"missing checkpoint: {p}")
            paths[key] = p
        bundle = cls(
            stage1=parsing.PoseParsingNet.load(paths["stage1"]),
            vq=vq.HierVq.load(paths["vq"]),
            sampler=sampler.MoeSampler.load(paths["sampler"]),
            indexnet=indexnet.IndexPredictor.load(paths["indexnet"]),
            checkpoint_dir=str(d),
        )
        bundle.hashes = {k: _file_sha256(paths[k]) for k in paths}
        return bundle


def _file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- png helpers ---------------------------------------------------------------


def label_grid_to_png_b64(grid):
    buf = io.BytesIO()
    Image.fromarray(grid.astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_label_grid(text):
    img = Image.open(io.BytesIO(base64.b64decode(text)))
    arr = np.asarray(img)
    if arr.ndim == 3:  # browser canvases export RGB(A); labels ride the red channel
        arr = arr[..., 0]
    return arr.astype(np.uint8)


def image_to_png_b64(image):
    buf = io.BytesIO()
    Image.fromarray(corpus.image_to_uint8(image), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# -- generation ----------------------------------------------------------------


def _stage2(bundle, parsing_map, attrs, seed, cfg):
    """Parsing + attributes -> image through the sampler / index nets / decoder."""
    cond = sampler.tokenize_conditions(parsing_map, attrs)
    top_tokens = sampler.diffusion_sample(
        bundle.sampler, cond, steps=cfg.diffusion_steps, seed=seed,
        temperature=cfg.temperature, policy=cfg.commit_policy,
    )
    feat_top = vq.codes_to_features(top_tokens, bundle.vq.books_top.data, c=bundle.vq.c_z)
    mask_bot = latents.latent_texture_mask(parsing_map, attrs, BOT_H, BOT_W)
    patch_tex = latents.patch_texture_ids(mask_bot)
    fine = indexnet.predict_fine_indices(bundle.indexnet, feat_top, patch_tex)
    feat_bot = vq.patch_codes_to_features(fine, bundle.vq.books_bot.data, c=bundle.vq.c_z)
    image = np.clip(bundle.vq.decode(feat_top, feat_bot), 0.0, 1.0)
    return image, top_tokens, fine


def generate(bundle, pose, shape_text, texture_text, seed, cfg=None, lexicon=None,
             parsing_override=None):
    """Full text-driven generation; returns (parsing, image, provenance)."""
    cfg = cfg or PipelineConfig()
    lexicon = lexicon or textattr.Lexicon.default()
    shape = textattr.shape_attrs_from_text(shape_text, lexicon)
    tex = textattr.texture_attrs_from_text(texture_text, lexicon)
    attrs = AttributeSet(**shape, **tex)
    if parsing_override is not None:
        parsing_map = np.asarray(parsing_override, dtype=np.uint8)
        if parsing_map.shape != (cfg.height, cfg.width):
            raise ValueError("parsing override has wrong shape")
        if parsing_map.max() >= N_CLASSES:
            raise ValueError(f"invalid parsing label {int(parsing_map.max())}")
    else:
        parsing_map = parsing.predict_parsing(bundle.stage1, pose, attrs)
    image, top_tokens, fine = _stage2(bundle, parsing_map, attrs, seed, cfg)
    provenance = {
        "version": PROVENANCE_VERSION,
        "pose_png_b64": label_grid_to_png_b64(pose),
        "shape_text": shape_text,
        "texture_text": texture_text,
        "attrs": attrs.to_dict(),
        "parsing_png_b64": label_grid_to_png_b64(parsing_map),
        "parsing_overridden": parsing_override is not None,
        "seed": int(seed),
        "diffusion_steps": cfg.diffusion_steps,
        "temperature": cfg.temperature,
        "commit_policy": cfg.commit_policy,
        "checkpoints": dict(bundle.hashes),
        "top_indices": top_tokens.indices.tolist(),
        "top_texture_ids": top_tokens.texture_ids.tolist(),
        "fine_indices": fine.indices.tolist(),
        "image_sha256": hashlib.sha256(corpus.image_to_uint8(image).tobytes()).hexdigest(),
    }
    return parsing_map, image, provenance


def regenerate(bundle, provenance, cfg=None):
    """Re-run generation from a provenance record; must match bit-exactly."""
    cfg = cfg or PipelineConfig()
    cfg_like = PipelineConfig(
        diffusion_steps=int(provenance["diffusion_steps"]),
        temperature=float(provenance["temperature"]),
        commit_policy=provenance["commit_policy"],
    )
    attrs = AttributeSet.from_dict(provenance["attrs"])
    stored_parsing = png_b64_to_label_grid(provenance["parsing_png_b64"])
    if provenance["parsing_overridden"]:
        parsing_map = stored_parsing
    else:
        pose = png_b64_to_label_grid(provenance["pose_png_b64"])
        parsing_map = parsing.predict_parsing(bundle.stage1, pose, attrs)
        if not np.array_equal(parsing_map, stored_parsing):
            raise RuntimeError("regeneration diverged at the parsing stage")
    image, top_tokens, fine = _stage2(bundle, parsing_map, attrs, provenance["seed"], cfg_like)
    if top_tokens.indices.tolist() != provenance["top_indices"]:
        raise RuntimeError("regeneration diverged at the coarse token stage")
    digest = hashlib.sha256(corpus.image_to_uint8(image).tobytes()).hexdigest()
    if digest != provenance["image_sha256"]:
        raise RuntimeError("regeneration diverged at the decoded image")
    return image


# -- training orchestration ------------------------------------------------------


def train_all(cfg, corpus_dir, checkpoint_dir, log=print, stages=None):
    """Train every stage in order, writing checkpoints as each completes."""
    stages = set(stages or ("stage1", "vq", "sampler", "indexnet", "ar", "predictor"))
    ckpt = Path(checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    train_records = corpus.load_corpus(corpus_dir, split="train")
    rng_seed = cfg.seed

    if "stage1" in stages:
        model = parsing.PoseParsingNet(np.random.default_rng([1, rng_seed]))
        parsing.train_stage1(model, train_records, cfg.epochs_stage1,
                             lr=cfg.learning_rate, batch_size=cfg.batch_size,
                             seed=rng_seed, log=log)
        model.save(ckpt / CHECKPOINT_FILES["stage1"])

    if "vq" in stages:
        model = vq.HierVq(np.random.default_rng([2, rng_seed]), c_z=cfg.c_z,
                          k_top=cfg.k_top, k_bot=cfg.k_bot)
        vq.train_top_stage(model, train_records, cfg.epochs_vq_top,
                           lr=cfg.learning_rate, batch_size=cfg.batch_size,
                           beta=cfg.beta, seed=rng_seed, log=log)
        model.save(ckpt / CHECKPOINT_FILES["vq_top"], meta={"stage": "top"})
        vq.train_bottom_stage(model, train_records, cfg.epochs_vq_bottom,
                              lr=cfg.learning_rate, batch_size=cfg.batch_size,
                              beta=cfg.beta, seed=rng_seed, log=log)
        model.save(ckpt / CHECKPOINT_FILES["vq"], meta={"stage": "full"})

    vq_model = None
    if stages & {"sampler", "indexnet", "ar"}:
        vq_path = ckpt / CHECKPOINT_FILES["vq"]
        if not vq_path.exists():
            raise MissingCheckpoint(f"missing checkpoint: {vq_path}")
        vq_model = vq.HierVq.load(vq_path)

    if "sampler" in stages:
        tokens = sampler.make_token_dataset(vq_model, train_records)
        model = sampler.MoeSampler(np.random.default_rng([3, rng_seed]), d=cfg.sampler_dim,
                                   heads=cfg.sampler_heads, blocks=cfg.sampler_blocks,
                                   k=cfg.k_top, moe=True)
        sampler.train_sampler(model, tokens, cfg.epochs_sampler, lr=cfg.learning_rate,
                              batch_size=cfg.batch_size, seed=rng_seed, log=log)
        model.save(ckpt / CHECKPOINT_FILES["sampler"])

    if "indexnet" in stages or "ar" in stages:
        fine_ds = indexnet.make_fine_dataset(vq_model, train_records)
        if "indexnet" in stages:
            model = indexnet.IndexPredictor(np.random.default_rng([4, rng_seed]),
                                            c_z=cfg.c_z, k_bot=cfg.k_bot)
            indexnet.train_index_net(model, fine_ds, cfg.epochs_indexnet,
                                     lr=cfg.learning_rate, batch_size=cfg.batch_size,
                                     seed=rng_seed, log=log)
            model.save(ckpt / CHECKPOINT_FILES["indexnet"])
        if "ar" in stages:
            model = indexnet.ArFineSampler(np.random.default_rng([5, rng_seed]),
                                           c_z=cfg.c_z, k_bot=cfg.k_bot)
            indexnet.train_ar_baseline(model, fine_ds, cfg.epochs_ar_baseline,
                                       lr=cfg.learning_rate, batch_size=cfg.batch_size,
                                       seed=rng_seed, log=log)
            model.save(ckpt / CHECKPOINT_FILES["ar_baseline"])

    if "predictor" in stages:
        model = predictor.TexturePredictor(np.random.default_rng([6, rng_seed]))
        predictor.train_predictor(model, train_records, cfg.epochs_predictor,
                                  lr=cfg.predictor_lr, batch_size=cfg.batch_size,
                                  seed=rng_seed, log=log)
        model.save(ckpt / CHECKPOINT_FILES["predictor"])


def train_attribute_predictor(cfg, corpus_dir, checkpoint_dir, log=print):
    train_all(cfg, corpus_dir, checkpoint_dir, log=log, stages=("predictor",))


# -- evaluation & ablations -------------------------------------------------------


@dataclass
class EvalReport:
    per_texture_accuracy: dict = field(default_factory=dict)
    recon_loss_top_only: float = float("nan")
    recon_loss_full: float = float("nan")
    sampler_timings_ms: dict = field(default_factory=dict)
    stage1_pixel_accuracy: float = float("nan")
    texture_ratios: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def recon_loss(vq_model, records, use_bottom):
    """Mean absolute reconstruction error over a record list."""
    losses = []
    for r in records:
        m_top = latents.latent_texture_mask(r.parsing, r.attrs, TOP_H, TOP_W)
        m_bot = latents.latent_texture_mask(r.parsing, r.attrs, BOT_H, BOT_W)
        img_hat = vq_model.reconstruct(r.image.astype(vq_model.dtype), m_top, m_bot,
                                       use_bottom=use_bottom)
        losses.append(float(np.abs(img_hat - r.image).mean()))
    return float(np.mean(losses))


def generated_texture_accuracy(bundle, pred_model, records, textures, seeds, cfg,
                               sampler_model=None, log=None):
    """Fraction of generations whose upper garment classifies as requested.

    For each texture id and seed, a test record's parsing conditions stage two
    with the upper texture forced to that id; the attribute predictor then
    scores the upper-garment region of the result.
    """
    sm = sampler_model or bundle.sampler
    work = ModelBundle(stage1=bundle.stage1, vq=bundle.vq, sampler=sm,
                       indexnet=bundle.indexnet, hashes={})
    acc = {}
    for tex_id in textures:
        hits, total = 0, 0
        for si, seed in enumerate(seeds):
            r = records[si % len(records)]
            attrs = AttributeSet(
                sleeve_length=r.attrs.sleeve_length, lower_length=r.attrs.lower_length,
                neckline=r.attrs.neckline, upper_texture=tex_id,
                lower_texture=r.attrs.lower_texture,
            )
            image, _, _ = _stage2(work, r.parsing, attrs, seed, cfg)
            region = r.parsing == CLS_UPPER
            if region.sum() < 8:
                continue
            got, _ = predictor.predict_texture(pred_model, image, region)
            hits += int(got == tex_id)
            total += 1
        acc[tex_id] = hits / total if total else float("nan")
        if log:
            log(f"texture {tex_id}: generated-attribute accuracy {acc[tex_id]:.3f}")
    return acc


def texture_ratios(bundle, pred_model, records, n, seed, cfg):
    """Observed texture distribution of generations with random attributes."""
    rng = np.random.default_rng([60, seed])
    counts = {t: 0 for t in corpus.TEXTURE_NAMES}
    total = 0
    for i in range(n):
        r = records[i % len(records)]
        attrs = corpus._draw_attrs(rng)
        image, _, _ = _stage2(bundle, r.parsing, attrs, int(rng.integers(0, 2**31)), cfg)
        region = r.parsing == CLS_UPPER
        if region.sum() < 8:
            continue
        got, _ = predictor.predict_texture(pred_model, image, region)
        counts[got] += 1
        total += 1
    return {corpus.TEXTURE_NAMES[t]: c / total for t, c in counts.items()} if total else {}


def run_ablation(name, cfg, corpus_dir, checkpoint_dir, log=print, n_eval=50,
                 n_seeds=20):
    """Run one named ablation; returns (variant_report, baseline_report)."""
    ckpt = Path(checkpoint_dir)
    test_records = corpus.load_corpus(corpus_dir, split="test")
    if name == "hier":
        top_path = ckpt / CHECKPOINT_FILES["vq_top"]
        full_path = ckpt / CHECKPOINT_FILES["vq"]
        for p in (top_path, full_path):
            if not p.exists():
                raise MissingCheckpoint(f"missing checkpoint: {p}")
        top_model = vq.HierVq.load(top_path)
        full_model = vq.HierVq.load(full_path)
        variant = EvalReport(recon_loss_full=recon_loss(full_model, test_records, True))
        baseline = EvalReport(recon_loss_top_only=recon_loss(top_model, test_records, False))
        if log:
            log(f"hier ablation: full {variant.recon_loss_full:.4f} vs "
                f"top-only {baseline.recon_loss_top_only:.4f}")
        return variant, baseline

    if name == "moe":
        bundle = ModelBundle.load(checkpoint_dir)
        pred_model = predictor.TexturePredictor.load(ckpt / CHECKPOINT_FILES["predictor"])
        base_path = ckpt / CHECKPOINT_FILES["sampler_baseline"]
        if not base_path.exists():
            raise MissingCheckpoint(f"missing checkpoint: {base_path}")
        base_sampler = sampler.MoeSampler.load(base_path)
        seeds = list(range(1000, 1000 + n_seeds))
        textures = sorted(corpus.TEXTURE_NAMES)
        with_acc = generated_texture_accuracy(
            bundle, pred_model, test_records, textures, seeds, cfg, log=log)
        without_acc = generated_texture_accuracy(
            bundle, pred_model, test_records, textures, seeds, cfg,
            sampler_model=base_sampler, log=log)
        variant = EvalReport(per_texture_accuracy={
            corpus.TEXTURE_NAMES[t]: with_acc[t] for t in textures})
        baseline = EvalReport(per_texture_accuracy={
            corpus.TEXTURE_NAMES[t]: without_acc[t] for t in textures})
        return variant, baseline

    if name == "ffpred":
        bundle = ModelBundle.load(checkpoint_dir)
        ar_path = ckpt / CHECKPOINT_FILES["ar_baseline"]
        if not ar_path.exists():
            raise MissingCheckpoint(f"missing checkpoint: {ar_path}")
        ar_model = indexnet.ArFineSampler.load(ar_path)
        fine_ds = indexnet.make_fine_dataset(bundle.vq, test_records[:n_eval])
        err_ff, err_ar = [], []
        for i, (feat_top, gt) in enumerate(fine_ds):
            r = test_records[i]
            ff_tokens = indexnet.predict_fine_indices(bundle.indexnet, feat_top, gt.texture_ids)
            ar_tokens = indexnet.autoregressive_fine_sample(ar_model, feat_top, gt.texture_ids,
                                                            seed=i)
            for tokens, sink in ((ff_tokens, err_ff), (ar_tokens, err_ar)):
                fb = vq.patch_codes_to_features(tokens, bundle.vq.books_bot.data, c=bundle.vq.c_z)
                img = bundle.vq.decode(feat_top, fb)
                sink.append(float(np.abs(img - r.image).mean()))
        big_ft = np.tile(fine_ds[0][0], (4, 4, 1))
        big_tex = np.tile(fine_ds[0][1].texture_ids, (4, 4))
        timing = indexnet.bench_fine_methods(bundle.indexnet, ar_model, big_ft, big_tex)
        variant = EvalReport(
            sampler_timings_ms={"feedforward": timing["feedforward_ms"], "grid": "16x8"},
            extra={"pixel_err": float(np.mean(err_ff)), "method": "feedforward"},
        )
        baseline = EvalReport(
            sampler_timings_ms={"autoregressive": timing["autoregressive_ms"], "grid": "16x8"},
            extra={"pixel_err": float(np.mean(err_ar)), "method": "autoregressive",
                   "speedup": timing["speedup"]},
        )
        if log:
            log(f"ffpred ablation: speedup {timing['speedup']:.1f}x, pixel err "
                f"{np.mean(err_ff):.4f} (ff) vs {np.mean(err_ar):.4f} (ar)")
        return variant, baseline

    raise ValueError(f"unknown ablation name: {name}")


def train_moe_baseline(cfg, corpus_dir, checkpoint_dir, log=print):
    """Train the single-head sampler with the MoE sampler's data and budget."""
    ckpt = Path(checkpoint_dir)
    vq_path = ckpt / CHECKPOINT_FILES["vq"]
    if not vq_path.exists():
        raise MissingCheckpoint(f"missing checkpoint: {vq_path}")
    vq_model = vq.HierVq.load(vq_path)
    train_records = corpus.load_corpus(corpus_dir, split="train")
    tokens = sampler.make_token_dataset(vq_model, train_records)
    model = sampler.MoeSampler(np.random.default_rng([3, cfg.seed]), d=cfg.sampler_dim,
                               heads=cfg.sampler_heads, blocks=cfg.sampler_blocks,
                               k=cfg.k_top, moe=False)
    sampler.train_sampler(model, tokens, cfg.epochs_sampler, lr=cfg.learning_rate,
                          batch_size=cfg.batch_size, seed=cfg.seed, log=log)
    model.save(ckpt / CHECKPOINT_FILES["sampler_baseline"])
