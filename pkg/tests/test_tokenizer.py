import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudssl.tokenizer import (TokenGrid, full_visible_plan, image_to_tokens, n_masked, patchify,
                                sample_mask, tokens_to_image, unpatchify)


@pytest.mark.parametrize("p, t, dim", [(8, 1024, 704), (16, 256, 2816)])
def test_token_counts(p, t, dim):
    g = image_to_tokens(np.zeros((11, 256, 256), np.float32), p)
    assert g.tokens.shape == (t, dim) and g.grid_shape == (256 // p, 256 // p)


@pytest.mark.parametrize("p", [8, 16])
def test_round_trip(p, rng):
    x = rng.random((11, 256, 256)).astype(np.float32)
    assert np.array_equal(tokens_to_image(image_to_tokens(x, p)), x)


def test_layout_row_major_channel_major():
    x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    g = image_to_tokens(x, 2)
    # token 1 is grid (0, 1): channel 0 rows 0-1 cols 2-3, then channel 1
    assert g.tokens[1].tolist() == [2, 3, 6, 7, 18, 19, 22, 23]
    assert g.tokens[2].tolist() == [8, 9, 12, 13, 24, 25, 28, 29]


def test_single_token_locality():
    tokens = np.zeros((1024, 704))
    tokens[37] = 1.0
    img = tokens_to_image(TokenGrid(tokens, 8, (32, 32), 11))
    r, c = divmod(37, 32)
    assert img[:, r * 8:(r + 1) * 8, c * 8:(c + 1) * 8].min() == 1.0
    assert img.sum() == 704


def test_permutations_on_two_by_two_grid(rng):
    x = rng.random((11, 16, 16))
    g = image_to_tokens(x, 8)
    for perm in itertools.permutations(range(4)):
        img = tokens_to_image(TokenGrid(g.tokens[list(perm)], 8, (2, 2), 11))
        assert np.array_equal(img, x) == (perm == (0, 1, 2, 3))


def test_torch_batched_matches_numpy(rng):
    x = rng.random((3, 11, 32, 32)).astype(np.float32)
    t = patchify(torch.from_numpy(x), 8)
    assert np.array_equal(t[1].numpy(), image_to_tokens(x[1], 8).tokens)
    assert torch.equal(unpatchify(t, 8, (4, 4), 11), torch.from_numpy(x))


@pytest.mark.parametrize("p", [7, 12, 0])
def test_indivisible_rejected(p):
    with pytest.raises(ValueError):
        image_to_tokens(np.zeros((11, 256, 256)), p)


def test_inconsistent_grid_rejected():
    with pytest.raises(ValueError):
        tokens_to_image(TokenGrid(np.zeros((100, 704)), 8, (32, 32), 11))


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 4), gh=st.integers(1, 5), gw=st.integers(1, 5), p=st.sampled_from([1, 2, 4, 8]),
       seed=st.integers(0, 1000))
def test_round_trip_property(c, gh, gw, p, seed):
    x = np.random.default_rng(seed).random((c, gh * p, gw * p))
    g = image_to_tokens(x, p)
    assert g.tokens.shape == (gh * gw, c * p * p)
    assert np.array_equal(tokens_to_image(g), x)


@pytest.mark.parametrize("t, k", [(1024, 768), (256, 192)])
def test_mask_sizes(t, k):
    plan = sample_mask(t, 0.75, 0)
    assert len(plan.masked_idx) == k and len(plan.visible_idx) == t - k


def test_mask_partition_and_determinism():
    a, b, c = sample_mask(1024, 0.75, 1), sample_mask(1024, 0.75, 1), sample_mask(1024, 0.75, 2)
    assert np.array_equal(a.masked_idx, b.masked_idx)
    assert not np.array_equal(a.masked_idx, c.masked_idx)
    both = np.concatenate([a.masked_idx, a.visible_idx])
    assert sorted(both.tolist()) == list(range(1024))


def test_half_to_even_rounding():
    assert n_masked(10, 0.25) == 2  # 2.5 -> 2
    assert n_masked(10, 0.35) == 4  # 3.5 -> 4
    assert n_masked(6, 0.75) == 4  # 4.5 -> 4


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.2])
def test_bad_ratio(ratio):
    with pytest.raises(ValueError):
        sample_mask(16, ratio, 0)


def test_full_visible_plan():
    plan = full_visible_plan(16)
    assert len(plan.masked_idx) == 0 and plan.visible_idx.tolist() == list(range(16))


@settings(max_examples=50, deadline=None)
@given(t=st.integers(2, 2000), ratio=st.floats(0.01, 0.99), seed=st.integers(0, 2 ** 32))
def test_mask_property(t, ratio, seed):
    plan = sample_mask(t, ratio, seed)
    assert len(plan.masked_idx) == round(ratio * t)
    assert len(np.intersect1d(plan.masked_idx, plan.visible_idx)) == 0
    assert plan.n_tokens == t
