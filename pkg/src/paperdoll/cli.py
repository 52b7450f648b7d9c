"""Command-line interface.

Machine-readable results go to stdout as JSON; progress logs go to stderr.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import corpus, indexnet, parsing, pipeline, predictor, sampler, textattr, vq
from .corpus import AttributeSet


class UsageError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def _load_config(args):
    cfg = pipeline.PipelineConfig.from_file(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _read_label_png(path):
    return np.asarray(Image.open(path)).astype(np.uint8)


# -- subcommand handlers ---------------------------------------------------------


def cmd_corpus_build(args):
    cfg = _load_config(args)
    weights = json.loads(args.weights) if args.weights else None
    manifest = corpus.dataset_build(args.out or cfg.corpus_dir, args.n or cfg.corpus_n,
                                    args.corpus_seed if args.corpus_seed is not None
                                    else cfg.corpus_seed, weights)
    _log(f"wrote {manifest['n']} samples to {args.out or cfg.corpus_dir}")
    _emit({"n": manifest["n"], "seed": manifest["seed"], "weights": manifest["weights"]})


def cmd_stage1_train(args):
    cfg = _load_config(args)
    pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                       args.checkpoints or cfg.checkpoint_dir, log=_log, stages=("stage1",))
    _emit({"checkpoint": str(Path(args.checkpoints or cfg.checkpoint_dir)
                             / pipeline.CHECKPOINT_FILES["stage1"])})


def cmd_stage1_eval(args):
    cfg = _load_config(args)
    model = parsing.PoseParsingNet.load(
        Path(args.checkpoints or cfg.checkpoint_dir) / pipeline.CHECKPOINT_FILES["stage1"])
    records = corpus.load_corpus(args.corpus or cfg.corpus_dir, split="test")
    _emit({"pixel_accuracy": parsing.pixel_accuracy(model, records)})


def cmd_stage1_infer(args):
    cfg = _load_config(args)
    model = parsing.PoseParsingNet.load(
        Path(args.checkpoints or cfg.checkpoint_dir) / pipeline.CHECKPOINT_FILES["stage1"])
    pose = _read_label_png(args.pose)
    attrs = AttributeSet.from_dict(json.loads(Path(args.attrs).read_text()))
    out = parsing.predict_parsing(model, pose, attrs)
    Image.fromarray(out, mode="L").save(args.out)
    _emit({"parsing": args.out})


def cmd_vq_train(args):
    cfg = _load_config(args)
    pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                       args.checkpoints or cfg.checkpoint_dir, log=_log, stages=("vq",))
    _emit({"checkpoint": str(Path(args.checkpoints or cfg.checkpoint_dir)
                             / pipeline.CHECKPOINT_FILES["vq"])})


def cmd_vq_inspect(args):
    cfg = _load_config(args)
    model = vq.HierVq.load(
        Path(args.checkpoints or cfg.checkpoint_dir) / pipeline.CHECKPOINT_FILES["vq"])
    records = corpus.load_corpus(args.corpus or cfg.corpus_dir, split=args.split)
    hist = vq.usage_histograms(model, records)
    _emit({
        level: {str(tid): counts.tolist() for tid, counts in enumerate(table)}
        for level, table in hist.items()
    })


def cmd_sampler_train(args):
    cfg = _load_config(args)
    if args.baseline:
        pipeline.train_moe_baseline(cfg, args.corpus or cfg.corpus_dir,
                                    args.checkpoints or cfg.checkpoint_dir, log=_log)
        name = pipeline.CHECKPOINT_FILES["sampler_baseline"]
    else:
        pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                           args.checkpoints or cfg.checkpoint_dir, log=_log,
                           stages=("sampler",))
        name = pipeline.CHECKPOINT_FILES["sampler"]
    _emit({"checkpoint": str(Path(args.checkpoints or cfg.checkpoint_dir) / name)})


def cmd_sampler_sample(args):
    cfg = _load_config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    model = sampler.MoeSampler.load(ckpt / pipeline.CHECKPOINT_FILES["sampler"])
    parsing_map = _read_label_png(args.parsing)
    attrs = AttributeSet.from_dict(json.loads(Path(args.attrs).read_text()))
    cond = sampler.tokenize_conditions(parsing_map, attrs)
    grid = sampler.diffusion_sample(model, cond, steps=cfg.diffusion_steps,
                                    seed=args.sample_seed, temperature=cfg.temperature,
                                    policy=cfg.commit_policy)
    _emit({
        "grid": grid.indices.tolist(),
        "texture_ids": grid.texture_ids.tolist(),
        "seed": args.sample_seed,
        "steps": cfg.diffusion_steps,
    })


def cmd_indexnet_train(args):
    cfg = _load_config(args)
    stages = ("indexnet", "ar") if args.with_baseline else ("indexnet",)
    pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                       args.checkpoints or cfg.checkpoint_dir, log=_log, stages=stages)
    _emit({"checkpoint": str(Path(args.checkpoints or cfg.checkpoint_dir)
                             / pipeline.CHECKPOINT_FILES["indexnet"])})


def cmd_indexnet_eval(args):
    cfg = _load_config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    vq_model = vq.HierVq.load(ckpt / pipeline.CHECKPOINT_FILES["vq"])
    model = indexnet.IndexPredictor.load(ckpt / pipeline.CHECKPOINT_FILES["indexnet"])
    records = corpus.load_corpus(args.corpus or cfg.corpus_dir, split="test")
    ds = indexnet.make_fine_dataset(vq_model, records)
    overall, per = indexnet.index_accuracy(model, ds)
    _emit({"top1_accuracy": overall,
           "per_texture": {str(k): v for k, v in per.items()}})


def cmd_indexnet_bench(args):
    cfg = _load_config(args)
    variant, baseline = pipeline.run_ablation("ffpred", cfg, args.corpus or cfg.corpus_dir,
                                              args.checkpoints or cfg.checkpoint_dir,
                                              log=_log, n_eval=args.n_eval)
    _emit([
        {"method": "feedforward", "grid": "16x8",
         "wall_ms": variant.sampler_timings_ms["feedforward"],
         "pixel_err": variant.extra["pixel_err"]},
        {"method": "autoregressive", "grid": "16x8",
         "wall_ms": baseline.sampler_timings_ms["autoregressive"],
         "pixel_err": baseline.extra["pixel_err"]},
    ])


def cmd_predictor_train(args):
    cfg = _load_config(args)
    pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                       args.checkpoints or cfg.checkpoint_dir, log=_log,
                       stages=("predictor",))
    _emit({"checkpoint": str(Path(args.checkpoints or cfg.checkpoint_dir)
                             / pipeline.CHECKPOINT_FILES["predictor"])})


def cmd_train_all(args):
    cfg = _load_config(args)
    pipeline.train_all(cfg, args.corpus or cfg.corpus_dir,
                       args.checkpoints or cfg.checkpoint_dir, log=_log)
    _emit({"checkpoints": args.checkpoints or cfg.checkpoint_dir})


def cmd_generate(args):
    cfg = _load_config(args)
    bundle = pipeline.ModelBundle.load(args.checkpoints or cfg.checkpoint_dir)
    lexicon = textattr.Lexicon.from_file(args.lexicon) if args.lexicon else None
    pose = _read_label_png(args.pose)
    override = _read_label_png(args.parsing) if args.parsing else None
    parsing_map, image, provenance = pipeline.generate(
        bundle, pose, args.shape_text, args.texture_text, args.gen_seed, cfg=cfg,
        lexicon=lexicon, parsing_override=override)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(parsing_map, mode="L").save(out / "parsing.png")
    Image.fromarray(corpus.image_to_uint8(image), mode="RGB").save(out / "image.png")
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True))
    _log(f"wrote parsing.png, image.png, provenance.json to {out}")
    _emit({"out_dir": str(out), "image_sha256": provenance["image_sha256"]})


def cmd_ablate(args):
    cfg = _load_config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    if args.name == "moe" and not (ckpt / pipeline.CHECKPOINT_FILES["sampler_baseline"]).exists():
        _log("single-head baseline sampler missing; training it with shared budget")
        pipeline.train_moe_baseline(cfg, args.corpus or cfg.corpus_dir, ckpt, log=_log)
    variant, baseline = pipeline.run_ablation(args.name, cfg, args.corpus or cfg.corpus_dir,
                                              ckpt, log=_log)
    _emit({"name": args.name, "variant": variant.to_dict(), "baseline": baseline.to_dict()})


def cmd_serve(args):
    cfg = _load_config(args)
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoints or cfg.checkpoint_dir, cfg=cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


# -- parser --------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="paperdoll", description=__doc__)
    p.add_argument("--config", help="pipeline config JSON file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--corpus", help="corpus directory")
        sp.add_argument("--checkpoints", help="checkpoint directory")

    sp = sub.add_parser("corpus", help="corpus commands")
    csub = sp.add_subparsers(dest="subcommand", required=True)
    b = csub.add_parser("build", help="write a synthetic corpus")
    b.add_argument("--out", help="output directory")
    b.add_argument("--n", type=int, default=None)
    b.add_argument("--corpus-seed", type=int, default=None)
    b.add_argument("--weights", help="JSON texture weights, e.g. '{\"3\": 0.05}'")
    b.set_defaults(func=cmd_corpus_build)

    sp = sub.add_parser("stage1", help="pose-to-parsing commands")
    ssub = sp.add_subparsers(dest="subcommand", required=True)
    t = ssub.add_parser("train"); common(t); t.set_defaults(func=cmd_stage1_train)
    e = ssub.add_parser("eval"); common(e); e.set_defaults(func=cmd_stage1_eval)
    i = ssub.add_parser("infer"); common(i)
    i.add_argument("--pose", required=True)
    i.add_argument("--attrs", required=True)
    i.add_argument("--out", default="parsing.png")
    i.set_defaults(func=cmd_stage1_infer)

    sp = sub.add_parser("vq", help="hierarchical VQ commands")
    vsub = sp.add_subparsers(dest="subcommand", required=True)
    t = vsub.add_parser("train"); common(t); t.set_defaults(func=cmd_vq_train)
    i = vsub.add_parser("inspect"); common(i)
    i.add_argument("--split", default="train")
    i.set_defaults(func=cmd_vq_inspect)

    sp = sub.add_parser("sampler", help="coarse index sampler commands")
    msub = sp.add_subparsers(dest="subcommand", required=True)
    t = msub.add_parser("train"); common(t)
    t.add_argument("--baseline", action="store_true", help="train the single-head baseline")
    t.set_defaults(func=cmd_sampler_train)
    s = msub.add_parser("sample"); common(s)
    s.add_argument("--parsing", required=True)
    s.add_argument("--attrs", required=True)
    s.add_argument("--sample-seed", type=int, default=0)
    s.set_defaults(func=cmd_sampler_sample)

    sp = sub.add_parser("indexnet", help="fine index prediction commands")
    isub = sp.add_subparsers(dest="subcommand", required=True)
    t = isub.add_parser("train"); common(t)
    t.add_argument("--with-baseline", action="store_true")
    t.set_defaults(func=cmd_indexnet_train)
    e = isub.add_parser("eval"); common(e); e.set_defaults(func=cmd_indexnet_eval)
    bn = isub.add_parser("bench"); common(bn)
    bn.add_argument("--n-eval", type=int, default=50)
    bn.set_defaults(func=cmd_indexnet_bench)

    sp = sub.add_parser("predictor", help="texture attribute predictor commands")
    psub = sp.add_subparsers(dest="subcommand", required=True)
    t = psub.add_parser("train"); common(t); t.set_defaults(func=cmd_predictor_train)

    sp = sub.add_parser("train-all", help="train every stage in order")
    common(sp)
    sp.set_defaults(func=cmd_train_all)

    sp = sub.add_parser("generate", help="text-driven generation")
    common(sp)
    sp.add_argument("--pose", required=True)
    sp.add_argument("--shape-text", required=True)
    sp.add_argument("--texture-text", required=True)
    sp.add_argument("--gen-seed", "--generation-seed", type=int, default=0)
    sp.add_argument("--parsing", help="parsing override PNG (palette edits)")
    sp.add_argument("--lexicon", help="lexicon JSON override")
    sp.add_argument("--out-dir", default="generated")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ablate", help="run a named ablation")
    common(sp)
    sp.add_argument("--name", required=True, choices=["hier", "moe", "ffpred"])
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("serve", help="run the studio HTTP service")
    common(sp)
    sp.add_argument("--port", type=int, default=8008)
    sp.add_argument("--host", default="127.0.0.1")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc.parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        result = args.func(args)
        return 0 if result is None else result
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime failures -> exit 2 with the cause
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
