"""Stage one: shape embedding, broadcast, network contracts, training smoke."""

import numpy as np
import pytest

from paperdoll import corpus, parsing
from paperdoll.corpus import AttributeSet
from paperdoll.nn import grad_check
from paperdoll.nn import tensor as T
from paperdoll.nn.layers import Conv2d, LayerNorm
from paperdoll.nn.tensor import Variable
from tests.conftest import records_from_seeds


@pytest.fixture(scope="module")
def net():
    return parsing.PoseParsingNet(np.random.default_rng(0))


def test_embed_attributes_deterministic(net):
    a = net.embedder(np.array([[2, 1, 0]])).data
    b = net.embedder(np.array([[2, 1, 0]])).data
    assert np.array_equal(a, b)
    assert a.shape == (1, 64)


def test_embed_attributes_sensitive_to_sleeve(net):
    a = net.embedder(np.array([[0, 1, 0]])).data
    b = net.embedder(np.array([[2, 1, 0]])).data
    assert not np.array_equal(a, b)


def test_zero_tables_give_zero_embedding():
    net2 = parsing.PoseParsingNet(np.random.default_rng(1))
    for table in net2.embedder.tables:
        table.table.data[:] = 0.0
    out = net2.embedder(np.array([[1, 0, 1]])).data
    assert np.array_equal(out, np.zeros((1, 64)))  # fusion is linear with zero bias


def test_broadcast_concat_spatially_constant():
    f = Variable(np.random.default_rng(0).standard_normal((2, 4, 2, 32)).astype(np.float32))
    fs = Variable(np.random.default_rng(1).standard_normal((2, 64)).astype(np.float32))
    out = parsing.broadcast_concat(f, fs)
    assert out.shape == (2, 4, 2, 96)
    appended = out.data[..., 32:]
    assert np.all(appended == appended[:, :1, :1, :])  # exactly constant over space
    assert np.array_equal(appended[0, 0, 0], fs.data[0])


def test_broadcast_concat_1x1_is_plain_concat():
    f = Variable(np.ones((1, 1, 1, 3), dtype=np.float32))
    fs = Variable(np.full((1, 64), 2.0, dtype=np.float32))
    out = parsing.broadcast_concat(f, fs)
    assert np.array_equal(out.data.reshape(-1), np.concatenate([np.ones(3), np.full(64, 2.0)]))


def test_logits_shape_and_simplex(net):
    s = corpus.gen_sample(0)
    logits = parsing.predict_parsing_logits(net, s.pose, s.attrs)
    assert logits.shape == (64, 32, 6)
    probs = T.softmax(Variable(logits), axis=-1).data
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_out_of_range_attribute_rejected(net):
    s = corpus.gen_sample(0)
    with pytest.raises(IndexError):
        parsing.predict_parsing_logits(net, s.pose, (9, 0, 0))


def test_train_empty_corpus_rejected(net):
    with pytest.raises(ValueError, match="empty corpus"):
        parsing.train_stage1(net, [], epochs=1)


def test_overfit_one_sample():
    recs = records_from_seeds([5])
    net2 = parsing.PoseParsingNet(np.random.default_rng(2))
    parsing.train_stage1(net2, recs, epochs=300, lr=3e-4, batch_size=1, seed=0)
    assert parsing.pixel_accuracy(net2, recs) >= 0.99


def test_loss_decreases_over_first_epochs():
    recs = records_from_seeds(range(16))
    net2 = parsing.PoseParsingNet(np.random.default_rng(3))
    hist = parsing.train_stage1(net2, recs, epochs=3, seed=0)
    assert hist.losses[0] > hist.losses[1] > hist.losses[2]


def test_training_deterministic():
    recs = records_from_seeds(range(4))

    def run():
        net2 = parsing.PoseParsingNet(np.random.default_rng(4))
        parsing.train_stage1(net2, recs, epochs=1, seed=0)
        return parsing.predict_parsing_logits(net2, recs[0].pose, recs[0].attrs)

    assert np.array_equal(run(), run())


def test_miniature_gradcheck():
    """Gradient integrity on a scaled-down copy (8x4 input, double precision)."""
    rng = np.random.default_rng(5)
    embedder = parsing.ShapeEmbedder(rng, dtype=np.float64)
    for table in embedder.tables:
        table.table.data *= 50.0  # O(1) values keep gradients above FD noise
    conv = Conv2d(rng, 7 + 64, 8, k=3, stride=2, dtype=np.float64)
    ln = LayerNorm(8, dtype=np.float64)
    head = Conv2d(rng, 8, 6, k=1, dtype=np.float64)
    pose = np.random.default_rng(6).integers(0, 7, (1, 8, 4))
    onehot = Variable(np.eye(7)[pose])
    labels = np.random.default_rng(7).integers(0, 6, (1, 4, 2))

    def f():
        fs = embedder(np.array([[1, 0, 1]]))
        h = parsing.broadcast_concat(onehot, fs)
        h = T.relu(ln(conv(h)))
        # objective scaled below ~0.5: keeps float cancellation noise in the
        # central differences under the 1e-8 relative-error floor
        return T.cross_entropy(head(h), labels) * 0.1

    params = embedder.parameters() + conv.parameters() + ln.parameters() + head.parameters()
    rep = grad_check(f, params, eps=1e-4)
    assert rep.max_rel_err < 1e-4, rep


def test_checkpoint_roundtrip(tmp_path, net):
    path = tmp_path / "stage1.ckpt"
    net.save(path)
    loaded = parsing.PoseParsingNet.load(path)
    s = corpus.gen_sample(1)
    assert np.array_equal(
        parsing.predict_parsing(net, s.pose, s.attrs),
        parsing.predict_parsing(loaded, s.pose, s.attrs),
    )
