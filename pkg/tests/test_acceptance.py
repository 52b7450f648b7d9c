"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one `ACCEPTANCE <name>: PASS|FAIL` line (run with -s to see
them live). Training-dependent criteria share one set of artifacts trained
with the default config on the default 1,000-sample corpus; the artifacts are
cached under .acceptance_cache keyed by config hash (first run trains
everything and takes ~30 minutes on a desktop CPU).
"""

import json
import math
import time
from importlib import resources

import numpy as np
import pytest

from paperdoll import corpus, indexnet, latents, parsing, pipeline, predictor, sampler, textattr, vq
from paperdoll.corpus import AttributeSet
from paperdoll.nn import grad_check
from paperdoll.nn import tensor as T
from paperdoll.nn.layers import Conv2d, LayerNorm
from paperdoll.nn.tensor import Variable
from paperdoll.vq import TokenGrid
from tests._artifacts import build_artifacts


def criterion(name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {name}: {status} — {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def artifacts():
    cfg = pipeline.PipelineConfig()
    root = build_artifacts(cfg, log=lambda s: print(s, flush=True))
    timings = json.loads((root / "timings.json").read_text())
    return {
        "cfg": cfg,
        "root": root,
        "corpus_dir": root / "corpus",
        "ckpt_dir": root / "checkpoints",
        "timings": timings,
    }


@pytest.fixture(scope="session")
def bundle(artifacts):
    return pipeline.ModelBundle.load(artifacts["ckpt_dir"])


@pytest.fixture(scope="session")
def test_records(artifacts):
    return corpus.load_corpus(artifacts["corpus_dir"], split="test")


# -- 1. quantizer oracle -----------------------------------------------------------


def test_quantizer_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    cases_per_level = 1000
    for _ in range(cases_per_level):  # top level: per-position codes
        h, w, c = 4, 2, 8
        k = int(rng.integers(1, 65))
        f = rng.standard_normal((h, w, c))
        mask = rng.integers(0, 5, (h, w))
        books = rng.standard_normal((5, k, c))
        _, idx = vq.quantize_nearest(f, mask, books)
        for i in range(h):
            for j in range(w):
                d = ((books[mask[i, j]] - f[i, j]) ** 2).sum(axis=1)
                best = min(range(k), key=lambda kk: (d[kk], kk))
                mismatches += int(idx[i, j] != best)
    for _ in range(cases_per_level):  # bottom level: 2x2 patch codes
        f = rng.standard_normal((4, 4, 3))
        mask = rng.integers(0, 5, (4, 4))
        k = int(rng.integers(1, 65))
        books = rng.standard_normal((5, k, 12))
        _, tokens = vq.quantize_patch(f, mask, books)
        ptex = latents.patch_texture_ids(mask)
        for i in range(2):
            for j in range(2):
                vec = f[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(-1)
                d = ((books[ptex[i, j]] - vec) ** 2).sum(axis=1)
                best = min(range(k), key=lambda kk: (d[kk], kk))
                mismatches += int(tokens.indices[i, j] != best)
    elapsed = time.perf_counter() - t0
    criterion(
        "quantizer-oracle",
        mismatches == 0 and elapsed < 10.0,
        f"{2 * cases_per_level} cases, {mismatches} mismatches, {elapsed:.2f}s (< 10 s)",
    )


# -- 2. gradient suite ----------------------------------------------------------------


def test_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(11)
    data = np.random.default_rng(12)

    # every layer type, full entry coverage (small shapes)
    from tests.test_nn import layer_cases

    for name, (f, params) in layer_cases().items():
        rep = grad_check(f, params)
        worst[f"layer:{name}"] = rep.max_rel_err

    probe = np.random.default_rng(13)

    # miniature stage-1 copy (8x4 pose input)
    net = parsing.PoseParsingNet(rng, widths=(8, 12), dtype=np.float64)
    for table in net.embedder.tables:
        table.table.data *= 50.0
    pose = np.eye(7)[data.integers(0, 7, (1, 8, 4))]
    labels = data.integers(0, 6, (1, 8, 4))

    def f_stage1():
        return T.cross_entropy(net(Variable(pose), np.array([[1, 0, 1]])), labels) * 0.1

    rep = grad_check(f_stage1, net.parameters(), eps=1e-4, max_entries=40, rng=probe)
    worst["mini:stage1"] = rep.max_rel_err

    # miniature VQ copy: encoder conv -> quantize -> straight-through -> decode
    from paperdoll.nn.layers import ConvTranspose2d

    enc = Conv2d(rng, 3, 4, k=3, stride=2, dtype=np.float64)
    dec = ConvTranspose2d(rng, 4, 3, dtype=np.float64)
    books = T.Parameter(data.standard_normal((5 * 4, 4)))
    img = Variable(data.uniform(0, 1, (1, 4, 4, 3)))
    mask = data.integers(0, 5, (1, 2, 2))

    def quantized():
        z = enc(img)
        zq = np.empty_like(z.data)
        idx = np.empty((1, 2, 2), dtype=np.int64)
        zq[0], idx[0] = vq.quantize_nearest(z.data[0], mask[0], books.data.reshape(5, 4, 4))
        return z, T.gather_rows(books, mask * 4 + idx)

    def f_vq_decoder():
        z, zq_var = quantized()
        total, _ = vq.vq_loss(img, T.sigmoid(dec(T.straight_through(z, zq_var))), z, zq_var)
        return total * 0.1

    def f_vq_encoder_commit():
        z, zq_var = quantized()
        diff = z - zq_var.detach()
        return T.vmean(diff * diff) * 0.025

    # Finite differences cannot see through the straight-through estimator
    # (its backward is a defined contract, certified in criterion 3), so the
    # decoder is checked through the full loss and the encoder through the
    # commitment term, which is its honest differentiable path.
    rep = grad_check(f_vq_decoder, dec.parameters(), eps=1e-4, max_entries=40, rng=probe)
    worst["mini:vq-decoder"] = rep.max_rel_err
    rep = grad_check(f_vq_encoder_commit, enc.parameters(), eps=1e-4, max_entries=40,
                     rng=probe)
    worst["mini:vq-encoder"] = rep.max_rel_err

    # miniature sampler copy
    smp = sampler.MoeSampler(rng, d=16, heads=2, blocks=1, k=4, dtype=np.float64)
    for emb in (smp.emb_code, smp.emb_seg, smp.emb_tex, smp.emb_pos):
        emb.table.data *= 50.0  # O(1) values keep gradients above FD noise
    rows = data.integers(0, 5 * 4 + 1, (1, 8))
    seg = data.integers(0, 6, (1, 8))
    tex = data.integers(0, 5, (1, 8))
    tgt = data.integers(0, 4, (1, 8))
    mask_pos = data.random((1, 8)) < 0.5
    mask_pos[0, 0] = True

    def f_sampler():
        return T.cross_entropy(smp(rows, seg, tex), tgt, mask=mask_pos) * 0.1

    rep = grad_check(f_sampler, smp.parameters(), eps=1e-4, max_entries=40, rng=probe)
    worst["mini:sampler"] = rep.max_rel_err

    # miniature index-net copy
    idxnet = indexnet.IndexPredictor(rng, c_z=4, k_bot=6, widths=(6, 8), dtype=np.float64)
    ft = Variable(data.standard_normal((1, 4, 2, 4)))
    tex2 = data.integers(0, 5, (1, 4, 2))
    tgt2 = data.integers(0, 6, (1, 4, 2))

    def f_index():
        return T.cross_entropy(idxnet(ft, tex2), tgt2) * 0.1

    rep = grad_check(f_index, idxnet.parameters(), eps=1e-4, max_entries=40, rng=probe)
    worst["mini:indexnet"] = rep.max_rel_err

    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    criterion(
        "gradient-suite",
        not bad and elapsed < 120.0,
        f"max rel err {max(worst.values()):.2e} over {len(worst)} checks, "
        f"{elapsed:.1f}s (< 2 min){'; failing: ' + str(bad) if bad else ''}",
    )


# -- 3. straight-through contract --------------------------------------------------------


def test_straight_through_contract():
    rng = np.random.default_rng(21)
    ok = True
    details = []
    # injected upstream gradient reproduced exactly at the pre-quantization feature
    for _ in range(20):
        pre = T.Parameter(rng.standard_normal((3, 5)))
        quant = Variable(rng.standard_normal((3, 5)))
        upstream = rng.standard_normal((3, 5))
        out = T.straight_through(pre, quant)
        loss = T.vsum(out * Variable(upstream))
        loss.backward()
        ok &= np.array_equal(pre.grad, upstream)
    details.append("upstream gradient copied exactly (20 random injections)")

    # codebook entries receive gradient only via the codebook term
    books = T.Parameter(rng.standard_normal((8, 4)))
    enc_out = T.Parameter(rng.standard_normal((3, 4)))
    ids = np.array([1, 5, 1])

    def full_loss(include_codebook_term):
        z = T.mul(enc_out, 1.0)
        zq = T.gather_rows(books, ids)
        st = T.straight_through(z, zq)
        recon = T.vmean(st * st)  # decoder path: reaches encoder via straight-through
        commit = T.vmean((z - zq.detach()) * (z - zq.detach())) * 0.25
        loss = recon + commit
        if include_codebook_term:
            loss = loss + T.vmean((zq - z.detach()) * (zq - z.detach()))
        return loss

    books.zero_grad()
    full_loss(False).backward()
    ok &= books.grad is None
    details.append("without codebook term: codebook gradient is identically absent")

    def codebook_term_only():
        zq = T.gather_rows(books, ids)
        diff = zq - enc_out.detach()
        return T.vmean(diff * diff)

    rep = grad_check(codebook_term_only, [books])
    books.zero_grad()
    codebook_term_only().backward()
    analytic_direct = books.grad.copy()
    books.zero_grad()
    full_loss(True).backward()
    ok &= np.allclose(books.grad, analytic_direct, atol=1e-12)
    ok &= rep.max_rel_err < 1e-6
    details.append(f"with codebook term: gradient equals the isolated term, which passes "
                   f"finite differences (rel err {rep.max_rel_err:.1e})")
    criterion("straight-through-contract", ok, "; ".join(details))


# -- 4. residual identity -----------------------------------------------------------------


def test_residual_identity_100_checkpoints():
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng([7, seed])
        model = vq.HierVq(rng)
        ft = rng.standard_normal((4, 2, 32)).astype(np.float32)
        zero = np.zeros((8, 4, 32), dtype=np.float32)
        a = model.decode(ft, zero)
        b = model.decode(ft)
        failures += int(not np.array_equal(a, b))
    criterion("residual-identity", failures == 0,
              f"100 random checkpoints/inputs, {failures} bitwise mismatches")


# -- 5. hierarchical ablation -----------------------------------------------------------


def test_hier_ablation(artifacts, test_records):
    cfg = artifacts["cfg"]
    t0 = time.perf_counter()
    variant, baseline = pipeline.run_ablation(
        "hier", cfg, artifacts["corpus_dir"], artifacts["ckpt_dir"], log=None)
    eval_time = time.perf_counter() - t0
    train_time = artifacts["timings"]["vq"]
    full = variant.recon_loss_full
    top = baseline.recon_loss_top_only
    rel_gain = (top - full) / top
    total_runtime = train_time + eval_time
    criterion(
        "hier-ablation",
        rel_gain >= 0.05 and total_runtime <= 45 * 60,
        f"top-only {top:.4f} -> full {full:.4f} ({rel_gain * 100:.1f}% relative, >= 5%); "
        f"runtime {total_runtime / 60:.1f} min (<= 45 min)",
    )


# -- 6. mixture-of-experts ablation -----------------------------------------------------


def test_moe_ablation(artifacts):
    cfg = artifacts["cfg"]
    variant, baseline = pipeline.run_ablation(
        "moe", cfg, artifacts["corpus_dir"], artifacts["ckpt_dir"], log=None, n_seeds=20)
    with_acc = variant.per_texture_accuracy
    without_acc = baseline.per_texture_accuracy
    gap = with_acc["plaid"] - without_acc["plaid"]
    detail = (
        f"plaid {without_acc['plaid']:.2f} -> {with_acc['plaid']:.2f} "
        f"(gap {gap * 100:.0f}pp, >= 10pp); "
        f"solid {without_acc['solid']:.2f} -> {with_acc['solid']:.2f}; "
        f"stripe {without_acc['stripe']:.2f} -> {with_acc['stripe']:.2f}; "
        f"dots {without_acc['dots']:.2f} -> {with_acc['dots']:.2f}"
    )
    criterion("moe-ablation", gap >= 0.10, detail)


# -- 7. feed-forward vs autoregressive ---------------------------------------------------


def test_ffpred_ablation(artifacts):
    cfg = artifacts["cfg"]
    variant, baseline = pipeline.run_ablation(
        "ffpred", cfg, artifacts["corpus_dir"], artifacts["ckpt_dir"], log=None, n_eval=50)
    speedup = baseline.extra["speedup"]
    err_ff = variant.extra["pixel_err"]
    err_ar = baseline.extra["pixel_err"]
    ratio = err_ff / err_ar
    criterion(
        "feedforward-vs-autoregressive",
        speedup >= 5.0 and ratio <= 1.1,
        f"16x8 grid speedup {speedup:.0f}x (>= 5x); pixel err {err_ff:.4f} vs "
        f"{err_ar:.4f} over 50 test images (ratio {ratio:.3f} <= 1.1)",
    )


# -- 8. sampler schedule invariants -------------------------------------------------------


def test_sampler_schedule_invariants():
    model = sampler.MoeSampler(np.random.default_rng(5), d=32, heads=4, blocks=1)
    ok = True
    details = []
    tex = np.array([[0, 1], [2, 0], [1, 0], [2, 1]])  # ids 3, 4 absent
    cond = sampler.ConditionTokens(seg=np.zeros((4, 2), dtype=np.int64), tex=tex)
    for steps in range(1, 9):
        grid, trace = sampler.diffusion_sample(model, cond, steps=steps, seed=steps,
                                               return_trace=True)
        quota = math.ceil(8 / steps)
        committed = 0
        seen = set()
        for t, chosen in enumerate(trace, start=1):
            committed += len(chosen)
            ok &= committed == min(8, t * quota)
            ok &= not (set(chosen) & seen)
            seen |= set(chosen)
        ok &= not np.any(grid.indices == TokenGrid.MASK)
        ok &= bool(np.all((grid.indices >= 0) & (grid.indices < model.k)))
    details.append("no MASK after T steps; committed counts exact for T=1..8; no recommits")

    a = sampler.diffusion_sample(model, cond, steps=8, seed=99)
    b = sampler.diffusion_sample(model, cond, steps=8, seed=99)
    ok &= np.array_equal(a.indices, b.indices)
    details.append("fixed-seed determinism")

    saved = model.heads.w.data.copy()
    absent = [t for t in range(5) if t not in set(tex.reshape(-1))]
    before = sampler.diffusion_sample(model, cond, steps=8, seed=4)
    for t_absent in absent:
        model.heads.w.data[t_absent] = 123.0
    after = sampler.diffusion_sample(model, cond, steps=8, seed=4)
    model.heads.w.data = saved
    ok &= np.array_equal(before.indices, after.indices)
    details.append("absent-texture head swap invariance")
    criterion("sampler-schedule", ok, "; ".join(details))


# -- 9. degenerate-distribution sampling ---------------------------------------------------


def test_degenerate_distribution_sampling():
    rng = np.random.default_rng(0)
    model = sampler.MoeSampler(rng)
    tex = np.array([[0, 0], [1, 1], [1, 1], [0, 0]])
    seg = np.array([[0, 0], [3, 3], [3, 3], [0, 0]])
    drng = np.random.default_rng(5)
    dataset = []
    for _ in range(64):
        idx = drng.integers(0, 32, (4, 2))
        idx[tex == 1] = 3  # texture-1 positions always hold index 3
        dataset.append((TokenGrid(indices=idx, texture_ids=tex.copy()),
                        sampler.ConditionTokens(seg=seg.copy(), tex=tex.copy())))
    sampler.train_sampler(model, dataset, epochs=40, lr=3e-4, seed=0)
    cond = dataset[0][1]
    hits, total = 0, 0
    for seed in range(200):
        grid = sampler.diffusion_sample(model, cond, steps=8, seed=seed)
        hits += int((grid.indices[tex == 1] == 3).sum())
        total += int((tex == 1).sum())
    freq = hits / total
    criterion("degenerate-sampling", freq >= 0.95,
              f"target-index frequency {freq:.3f} over 200 draws (>= 0.95)")


# -- 10. stage one ---------------------------------------------------------------------------


def test_stage1_accuracy_and_monotonicity(bundle, test_records):
    acc = parsing.pixel_accuracy(bundle.stage1, test_records)
    increases = 0
    for seed in range(10):
        s0 = corpus.gen_sample(seed * 1000 + 31, spec=AttributeSet(0, 1, 0, 1, 1))
        s2 = corpus.gen_sample(seed * 1000 + 31, spec=AttributeSet(2, 1, 0, 1, 1))
        assert np.array_equal(s0.pose, s2.pose)
        arms = (s0.pose == corpus.PART_LEFT_ARM) | (s0.pose == corpus.PART_RIGHT_ARM)
        p0 = parsing.predict_parsing(bundle.stage1, s0.pose, s0.attrs)
        p2 = parsing.predict_parsing(bundle.stage1, s2.pose, s2.attrs)
        n0 = int((p0[arms] == corpus.CLS_UPPER).sum())
        n2 = int((p2[arms] == corpus.CLS_UPPER).sum())
        increases += int(n2 > n0)
    criterion(
        "stage1",
        acc >= 0.90 and increases >= 8,
        f"held-out pixel accuracy {acc:.3f} (>= 0.90); sleeve monotonicity "
        f"{increases}/10 seeds (>= 8)",
    )


# -- 11. text mapper --------------------------------------------------------------------------


def test_text_mapper():
    lex = textattr.Lexicon.default()
    self_ok, self_total = 0, 0
    for attr, classes in lex.table.items():
        for cls, phrases in classes.items():
            for phrase in phrases:
                got, _ = textattr.classify_attribute(phrase, attr, lex)
                self_ok += int(got == cls)
                self_total += 1
    paras = json.loads(
        resources.files("paperdoll.data").joinpath("paraphrases.json").read_text())
    para_ok = sum(
        textattr.classify_attribute(p["phrase"], p["attribute"], lex)[0] == p["expected"]
        for p in paras)
    criterion(
        "text-mapper",
        self_ok == self_total and para_ok / len(paras) >= 0.90,
        f"self-classification {self_ok}/{self_total} (100% required); paraphrases "
        f"{para_ok}/{len(paras)} ({para_ok / len(paras) * 100:.0f}%, >= 90%)",
    )


# -- 12. end-to-end provenance -----------------------------------------------------------------


def test_provenance_bit_exact(bundle):
    cases = [
        ("long sleeves and trousers with a v neck", "plaid shirt, solid trousers", 17, None),
        ("short sleeves and shorts", "stripes", 4242, None),
    ]
    s = corpus.gen_sample(55)
    cases.append(("sleeveless top and shorts", "dots, plaid", 7, s.parsing))
    exact = 0
    for shape_text, texture_text, seed, override in cases:
        pose = corpus.gen_sample(seed % 13).pose
        parsing_map, image, prov = pipeline.generate(
            bundle, pose, shape_text, texture_text, seed, parsing_override=override)
        again = pipeline.regenerate(bundle, prov)
        exact += int(np.array_equal(image, again))
    criterion("provenance", exact == len(cases),
              f"{exact}/{len(cases)} records regenerate their image bit-exactly")


# -- codebook health (spec invariant, not a numbered criterion) --------------------------------


def test_codebook_non_collapse(artifacts):
    model = vq.HierVq.load(artifacts["ckpt_dir"] / pipeline.CHECKPOINT_FILES["vq"])
    train_records = corpus.load_corpus(artifacts["corpus_dir"], split="train")
    hist = vq.usage_histograms(model, train_records)
    lines = []
    ok = True
    for level, table in hist.items():
        for tid in range(table.shape[0]):
            total = table[tid].sum()
            if total == 0:
                continue  # texture absent from the split
            frac = (table[tid] > 0).mean()
            ok &= frac >= 0.25
            lines.append(f"{level}/tex{tid}: {frac * 100:.0f}%")
    criterion("codebook-usage", ok,
              "entries used per active partition: " + ", ".join(lines) + " (>= 25%)")


# -- generate-op consistency (module example, not a primary criterion) -------------------------


def test_generated_texture_text_consistency(artifacts, bundle, test_records):
    """'striped top' requests should come back classified as stripe >= 70%."""
    cfg = artifacts["cfg"]
    pred = predictor.TexturePredictor.load(
        artifacts["ckpt_dir"] / pipeline.CHECKPOINT_FILES["predictor"])
    acc = pipeline.generated_texture_accuracy(
        bundle, pred, test_records, [corpus.TEX_STRIPE], seeds=list(range(50)), cfg=cfg)
    criterion("generated-texture-consistency", acc[corpus.TEX_STRIPE] >= 0.70,
              f"stripe generations classified as stripe: {acc[corpus.TEX_STRIPE] * 100:.0f}% "
              f"of 50 seeds (>= 70%)")
