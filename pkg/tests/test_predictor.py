"""Texture attribute predictor: input masking and a small learning smoke test."""

import numpy as np
import pytest

from paperdoll import corpus, predictor
from paperdoll.corpus import AttributeSet
from tests.conftest import records_from_seeds


def test_masked_input_zeroes_outside_region():
    s = corpus.gen_sample(0)
    mask = s.parsing == corpus.CLS_UPPER
    x = predictor.masked_input(s.image, mask)
    assert x.shape == (64, 32, 4)
    assert np.all(x[~mask][:, :3] == 0.0)
    assert np.all(x[..., 3] == mask.astype(np.float32))


def test_predict_texture_deterministic():
    model = predictor.TexturePredictor(np.random.default_rng(0))
    model.trained = True
    s = corpus.gen_sample(1)
    mask = s.parsing == corpus.CLS_UPPER
    a = predictor.predict_texture(model, s.image, mask)
    b = predictor.predict_texture(model, s.image, mask)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])
    assert abs(a[1].sum() - 1.0) < 1e-6


def test_learns_solid_vs_stripe():
    # two-texture corpus; a short budget should separate them
    recs = []
    for i in range(24):
        tex = 1 if i % 2 == 0 else 2
        recs.extend(records_from_seeds([i], spec=AttributeSet(2, 1, 0, tex, tex)))
    model = predictor.TexturePredictor(np.random.default_rng(1))
    predictor.train_predictor(model, recs, epochs=40, lr=1e-3, seed=0)
    acc, confusion = predictor.predictor_accuracy(model, recs)
    assert acc >= 0.9
    assert confusion.shape == (4, 4)
    assert confusion.sum() == 2 * len(recs)


def test_empty_corpus_rejected():
    model = predictor.TexturePredictor(np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty corpus"):
        predictor.train_predictor(model, [], epochs=1)


def test_checkpoint_roundtrip(tmp_path):
    model = predictor.TexturePredictor(np.random.default_rng(2))
    model.trained = True
    model.save(tmp_path / "p.ckpt")
    loaded = predictor.TexturePredictor.load(tmp_path / "p.ckpt")
    s = corpus.gen_sample(3)
    mask = s.parsing == corpus.CLS_LOWER
    assert predictor.predict_texture(model, s.image, mask)[0] == \
        predictor.predict_texture(loaded, s.image, mask)[0]
