"""Quantizers against brute-force oracles, straight-through contract, loss
terms, residual identity, and stage-wise training behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paperdoll import latents, vq
from paperdoll.nn import grad_check
from paperdoll.nn import tensor as T
from paperdoll.nn.tensor import Parameter, Variable
from tests.conftest import records_from_seeds


def brute_force_nearest(vec, partition):
    best, best_d = 0, np.inf
    for k in range(partition.shape[0]):
        d = float(np.sum((vec - partition[k]) ** 2))
        if d < best_d:
            best, best_d = k, d
    return best


# -- quantize_nearest ------------------------------------------------------------


def test_two_entry_example():
    books = np.zeros((1, 2, 2))
    books[0, 0] = (0.0, 0.0)
    books[0, 1] = (1.0, 1.0)
    f = np.array([[[0.2, 0.1]]])
    q, idx = vq.quantize_nearest(f, np.zeros((1, 1), dtype=int), books)
    assert idx[0, 0] == 0
    assert np.array_equal(q[0, 0], [0.0, 0.0])


def test_exact_entry_idempotent():
    rng = np.random.default_rng(0)
    books = rng.standard_normal((1, 8, 4))
    f = books[0, 5].reshape(1, 1, 4).copy()
    q, idx = vq.quantize_nearest(f, np.zeros((1, 1), dtype=int), books)
    assert idx[0, 0] == 5
    assert np.array_equal(q, f)


def test_equidistant_tie_takes_lower_index():
    books = np.zeros((1, 4, 1))
    books[0] = np.array([[9.0], [1.0], [9.0], [-1.0]])  # entries 1 and 3 equidistant from 0
    f = np.zeros((1, 1, 1))
    _, idx = vq.quantize_nearest(f, np.zeros((1, 1), dtype=int), books)
    assert idx[0, 0] == 1


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w, c = 4, 2, 6
    k = int(rng.integers(1, 9))
    f = rng.standard_normal((h, w, c))
    mask = rng.integers(0, 5, (h, w))
    books = rng.standard_normal((5, k, c))
    q, idx = vq.quantize_nearest(f, mask, books)
    for i in range(h):
        for j in range(w):
            expected = brute_force_nearest(f[i, j], books[mask[i, j]])
            assert idx[i, j] == expected
            assert np.array_equal(q[i, j], books[mask[i, j], expected])


def test_partition_locality():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 2, 6))
    mask = np.zeros((4, 2), dtype=int)
    mask[0, 0] = 2
    books = rng.standard_normal((5, 8, 6))
    q1, i1 = vq.quantize_nearest(f, mask, books)
    perturbed = books.copy()
    for absent in (1, 3, 4):
        perturbed[absent] = rng.standard_normal((8, 6)) * 100
    q2, i2 = vq.quantize_nearest(f, mask, perturbed)
    assert np.array_equal(q1, q2)
    assert np.array_equal(i1, i2)


def test_unknown_texture_id_rejected():
    f = np.zeros((1, 1, 2))
    books = np.zeros((5, 2, 2))
    with pytest.raises(ValueError, match="no codebook partition"):
        vq.quantize_nearest(f, np.array([[7]]), books)


def test_nonfinite_partition_rejected():
    f = np.zeros((1, 1, 2))
    books = np.zeros((5, 2, 2))
    books[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        vq.quantize_nearest(f, np.zeros((1, 1), dtype=int), books)


# -- quantize_patch ---------------------------------------------------------------


def test_patch_exact_code_roundtrip():
    rng = np.random.default_rng(2)
    books = rng.standard_normal((5, 4, 16))  # 2x2 patches of c=4
    patch = books[3, 2].reshape(2, 2, 4)
    f = np.tile(patch, (2, 2, 1))  #4x4 grid = 2x2 patches, all equal to code 2
    mask = np.full((4, 4), 3, dtype=int)
    q, tokens = vq.quantize_patch(f, mask, books)
    assert np.all(tokens.indices == 2)
    assert np.all(tokens.texture_ids == 3)
    assert np.array_equal(q, f)


def test_single_entry_partition_always_selected():
    rng = np.random.default_rng(3)
    books = rng.standard_normal((5, 1, 16))
    f = rng.standard_normal((4, 2, 4))
    mask = np.full((4, 2), 2, dtype=int)
    q, tokens = vq.quantize_patch(f, mask, books)
    assert np.all(tokens.indices == 0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_patch_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((4, 4, 3))
    mask = rng.integers(0, 5, (4, 4))
    books = rng.standard_normal((5, 4, 12))
    q, tokens = vq.quantize_patch(f, mask, books)
    ptex = latents.patch_texture_ids(mask)
    assert np.array_equal(tokens.texture_ids, ptex)
    for i in range(2):
        for j in range(2):
            vec = f[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(-1)
            expected = brute_force_nearest(vec, books[ptex[i, j]])
            assert tokens.indices[i, j] == expected


# -- straight-through --------------------------------------------------------------


def test_straight_through_forward_is_quantized():
    x = Variable(np.array([1.0, 2.0]))
    q = Variable(np.array([9.0, -3.0]))
    out = T.straight_through(x, q)
    assert np.array_equal(out.data, [9.0, -3.0])


def test_straight_through_gradient_identity_copy():
    x = Parameter(np.array([1.0, 2.0, 3.0]))
    q = Variable(np.array([0.5, 0.5, 0.5]))
    out = T.straight_through(x, q)
    loss = T.vsum(out * Variable(np.array([2.0, -1.0, 4.0])))
    loss.backward()
    assert np.array_equal(x.grad, [2.0, -1.0, 4.0])


def test_straight_through_sum_gives_unit_grads():
    x = Parameter(np.ones(6))
    q = Variable(np.zeros(6))
    T.vsum(T.straight_through(x, q)).backward()
    assert np.array_equal(x.grad, np.ones(6))


def test_straight_through_no_gradient_into_quantized():
    x = Parameter(np.ones(3))
    q = Parameter(np.zeros(3))
    T.vsum(T.straight_through(x, q)).backward()
    assert q.grad is None


def test_straight_through_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        T.straight_through(Variable(np.zeros(2)), Variable(np.zeros(3)))


# -- vq_loss ------------------------------------------------------------------------


def test_vq_loss_zero_when_perfect():
    img = Variable(np.full((2, 2, 3), 0.5))
    z = Variable(np.ones((1, 1, 4)))
    total, parts = vq.vq_loss(img, img, z, z)
    assert parts["total"] == 0.0


def test_vq_loss_mean_absolute_error():
    img = Variable(np.full((2, 2, 3), 0.25))
    img_hat = img + Variable(np.full((2, 2, 3), 0.5))
    z = Variable(np.ones((1, 1, 4)))
    total, parts = vq.vq_loss(img, img_hat, z, z)
    assert abs(parts["total"] - 0.5) < 1e-12
    assert abs(parts["recon"] - 0.5) < 1e-12


def test_vq_loss_term_isolation_by_finite_differences():
    """Codebook entries feel only the codebook term; the encoder side only
    the commitment + reconstruction path."""
    rng = np.random.default_rng(4)
    book = Parameter(rng.standard_normal((4, 3)))
    enc = Parameter(rng.standard_normal((2, 3)))
    img = Variable(rng.standard_normal((2, 3)))

    def commitment_only():
        z = T.matmul(enc, Variable(np.eye(3)))
        q = T.gather_rows(book, np.array([1, 2]))
        diff = z - q.detach()
        return T.vmean(diff * diff) * 0.25

    rep = grad_check(commitment_only, [enc])
    assert rep.max_rel_err < 1e-6
    book.zero_grad()
    commitment_only().backward()
    assert book.grad is None  # commitment term never reaches the codebook

    def codebook_only():
        z = T.matmul(enc, Variable(np.eye(3)))
        q = T.gather_rows(book, np.array([1, 2]))
        diff = q - z.detach()
        return T.vmean(diff * diff)

    rep = grad_check(codebook_only, [book])
    assert rep.max_rel_err < 1e-6
    enc.zero_grad()
    codebook_only().backward()
    assert enc.grad is None


# -- hierarchical model ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_vq_records():
    return records_from_seeds(range(8))


def test_encode_decode_shapes(tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    r = tiny_vq_records[0]
    m_top = latents.latent_texture_mask(r.parsing, r.attrs, 4, 2)
    m_bot = latents.latent_texture_mask(r.parsing, r.attrs, 8, 4)
    feat_top, tokens = model.encode_top_tokens(r.image, m_top)
    assert feat_top.shape == (4, 2, 32)
    assert tokens.indices.shape == (4, 2)
    feat_bot, btokens = model.encode_bottom_tokens(r.image, m_bot)
    assert feat_bot.shape == (8, 4, 32)
    assert btokens.indices.shape == (4, 2)
    out = model.decode(feat_top, feat_bot)
    assert out.shape == (64, 32, 3)
    assert np.isfinite(out).all()


def test_residual_identity_bitwise(tiny_vq_records):
    r = tiny_vq_records[0]
    for seed in range(5):
        model = vq.HierVq(np.random.default_rng(seed))
        m_top = latents.latent_texture_mask(r.parsing, r.attrs, 4, 2)
        feat_top, _ = model.encode_top_tokens(r.image, m_top)
        zero_bottom = np.zeros((8, 4, 32), dtype=np.float32)
        assert np.array_equal(model.decode(feat_top, zero_bottom), model.decode(feat_top))


def test_stage_isolation_bottom_perturbation(tiny_vq_records):
    r = tiny_vq_records[0]
    model = vq.HierVq(np.random.default_rng(0))
    m_top = latents.latent_texture_mask(r.parsing, r.attrs, 4, 2)
    feat1, _ = model.encode_top_tokens(r.image, m_top)
    for p in model.e_bot.parameters():
        p.data = p.data + 1.0
    feat2, _ = model.encode_top_tokens(r.image, m_top)
    assert np.array_equal(feat1, feat2)


def test_bottom_stage_requires_frozen_top(tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    with pytest.raises(RuntimeError, match="top stage"):
        vq.train_bottom_stage(model, tiny_vq_records, epochs=1)


def test_overfit_one_sample_halves_loss(tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    hist = vq.train_top_stage(model, tiny_vq_records[:1], epochs=200, lr=1e-3,
                              batch_size=1, seed=0)
    assert hist.losses[-1] <= 0.5 * hist.losses[0]


def test_top_params_frozen_during_bottom_stage(tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    vq.train_top_stage(model, tiny_vq_records, epochs=1, seed=0)
    before = {
        name: p.data.copy()
        for name, p in model.named_parameters()
        if name.startswith(("e_top", "d_top", "books_top"))
    }
    vq.train_bottom_stage(model, tiny_vq_records, epochs=1, seed=0)
    for name, p in model.named_parameters():
        if name in before:
            assert p.data.tobytes() == before[name].tobytes(), name


def test_dead_code_report(tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    hist = vq.train_top_stage(model, tiny_vq_records, epochs=1, seed=0)
    dead = hist.dead_entries()
    assert set(dead) == set(range(5))
    used = sum(int(hist.usage[t].sum()) for t in range(5))
    assert used == len(tiny_vq_records) * 8  # every position counted once


def test_checkpoint_roundtrip(tmp_path, tiny_vq_records):
    model = vq.HierVq(np.random.default_rng(0))
    vq.train_top_stage(model, tiny_vq_records[:2], epochs=1, seed=0)
    path = tmp_path / "vq.ckpt"
    model.save(path)
    loaded = vq.HierVq.load(path)
    assert loaded.top_frozen
    r = tiny_vq_records[0]
    m_top = latents.latent_texture_mask(r.parsing, r.attrs, 4, 2)
    a, _ = model.encode_top_tokens(r.image, m_top)
    b, _ = loaded.encode_top_tokens(r.image, m_top)
    assert np.array_equal(a, b)
