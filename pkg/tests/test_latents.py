"""Majority pooling and latent texture mask derivation."""

import numpy as np
import pytest

from paperdoll import corpus, latents
from paperdoll.corpus import AttributeSet


def test_majority_pool_hand_case():
    grid = np.array([
        [0, 0, 1, 1],
        [0, 2, 1, 1],
        [3, 3, 4, 4],
        [3, 3, 4, 5],
    ])
    out = latents.majority_pool(grid, 2, 2, 6)
    assert out.tolist() == [[0, 1], [3, 4]]


def test_majority_pool_tie_takes_smaller_id():
    grid = np.array([[2, 5], [5, 2]])
    out = latents.majority_pool(grid, 1, 1, 6)
    assert out.tolist() == [[2]]


def test_majority_pool_idempotent_on_target_size():
    grid = np.random.default_rng(0).integers(0, 5, (4, 2))
    out = latents.majority_pool(grid, 4, 2, 5)
    assert np.array_equal(out, grid)


def test_majority_pool_rejects_nondivisible():
    with pytest.raises(ValueError):
        latents.majority_pool(np.zeros((5, 4), dtype=int), 2, 2, 3)


def test_texture_instance_map():
    s = corpus.gen_sample(2, spec=AttributeSet(2, 1, 0, 3, 4))
    tex = latents.texture_instance_map(s.parsing, s.attrs)
    assert set(np.unique(tex)) <= {0, 3, 4}
    assert np.all((tex == 3) == (s.parsing == corpus.CLS_UPPER))
    assert np.all((tex == 4) == (s.parsing == corpus.CLS_LOWER))


def test_latent_texture_mask_upper_only_figure():
    # all-background parsing except an upper-garment block dominating one cell
    parsing = np.zeros((64, 32), dtype=np.uint8)
    parsing[0:16, 0:16] = corpus.CLS_UPPER  # fills block (0,0) of a 4x2 pooling
    attrs = AttributeSet(0, 0, 0, 3, 1)
    mask = latents.latent_texture_mask(parsing, attrs, 4, 2)
    assert mask[0, 0] == 3
    assert (mask.sum() == 3)  # everything else background


def test_latent_texture_mask_majority_not_plurality_of_labels():
    # garment is the plurality parsing label in the block but non-garment
    # pixels together form the majority: the pooled texture id must be 0.
    parsing = np.zeros((64, 32), dtype=np.uint8)
    block = parsing[0:16, 0:16]
    block[:7, :] = corpus.CLS_UPPER  # 7 rows upper (112 px)
    block[7:13, :] = corpus.CLS_SKIN  # 6 rows skin (96 px)
    block[13:16, :] = corpus.CLS_HEAD  # 3 rows head (48 px)
    attrs = AttributeSet(0, 0, 0, 2, 1)
    mask = latents.latent_texture_mask(parsing, attrs, 4, 2)
    assert mask[0, 0] == 0


def test_patch_texture_ids_majority_and_tie():
    mask = np.array([
        [1, 1, 0, 2],
        [1, 0, 2, 0],
        [3, 3, 4, 4],
        [3, 3, 4, 4],
    ])
    out = latents.patch_texture_ids(mask, patch=2)
    # patch (0,0): {1,1,1,0} -> 1; patch (0,1): {0,2,2,0} tie -> 0
    assert out.tolist() == [[1, 0], [3, 4]]
