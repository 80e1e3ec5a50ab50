from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudssl.geo_encoding import (EncodingConfig, compose_token_embedding, encode_latlon,
                                   encode_timestamp, posembed_sincos_grid, token_centers)
from cloudssl.synth import latlon_grid


def utc(*args):
    return datetime(*args, tzinfo=timezone.utc)


def test_origin_is_zero_phase():
    e = posembed_sincos_grid((32, 32), 256)
    assert np.array_equal(e[0], np.tile([0.0, 1.0], 128))


def test_positions_distinct_and_equal_norm():
    e = posembed_sincos_grid((32, 32), 256)
    d = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-6
    assert np.allclose(np.linalg.norm(e, axis=1), np.sqrt(128))


def test_frequency_range():
    e = posembed_sincos_grid((1, 2), 16)
    # column half, token (0, 1): phases 1 * omega with omega from 1 to 1e-4
    col = e[1, 8:]
    assert col[0] == pytest.approx(np.sin(1.0)) and col[6] == pytest.approx(np.sin(1e-4))


@pytest.mark.parametrize("d", [6, 0, 10])
def test_pos_divisibility(d):
    with pytest.raises(ValueError):
        posembed_sincos_grid((4, 4), d)


def test_noon_base_pair():
    v = encode_timestamp(utc(2010, 3, 1, 12), 16)
    tod = v[8:]
    assert tod[0] == pytest.approx(0.0, abs=1e-12) and tod[1] == pytest.approx(-1.0)


def test_midnight_continuity():
    a = encode_timestamp(utc(2010, 3, 1, 0, 0, 0), 16)
    b = encode_timestamp(utc(2010, 2, 28, 23, 59, 59) + timedelta(seconds=1), 16)
    assert np.array_equal(a[8:], b[8:])


def test_jan_vs_jul():
    a = encode_timestamp(utc(2010, 1, 1), 16)
    b = encode_timestamp(utc(2010, 7, 2), 16)
    assert np.array_equal(a[8:], b[8:])
    assert not np.allclose(a[:8], b[:8])
    # 2 July is day 182 of 365 -> fraction 182/365
    assert b[0] == pytest.approx(np.sin(2 * np.pi * 182 / 365))


def test_timestamp_deterministic():
    t = utc(2010, 5, 5, 5, 5, 5)
    assert np.array_equal(encode_timestamp(t, 32), encode_timestamp(t, 32))


def test_latlon_zero_phase_and_range():
    assert np.array_equal(encode_latlon(np.array([[0.0, 0.0]]), 4)[0], [0, 1, 0, 1])
    with pytest.raises(ValueError):
        encode_latlon(np.array([[91.0, 0.0]]), 4)
    with pytest.raises(ValueError):
        encode_latlon(np.array([[0.0, -181.0]]), 4)


def test_tokens_32_pixels_apart_differ():
    grid = latlon_grid((0.0, 0.0), 256, 0.03)
    c = token_centers(grid, 8)
    e = encode_latlon(c, 96)
    assert not np.allclose(e[0], e[4])


def test_center_depends_only_on_block_mean(rng):
    grid = latlon_grid((5.0, 5.0), 16, 0.03)
    shuffled = grid.copy()
    block = shuffled[:, :8, :8].reshape(2, -1)
    perm = rng.permutation(64)
    shuffled[:, :8, :8] = block[:, perm].reshape(2, 8, 8)
    assert np.allclose(token_centers(grid, 8), token_centers(shuffled, 8), atol=1e-12)


def test_default_split_for_384():
    assert EncodingConfig(384, True, True).dim_split == (192, 96, 96)
    assert EncodingConfig(384).dim_split == (384, 0, 0)


@pytest.mark.parametrize("kw", [
    dict(embed_dim=64, use_time=True, dim_split=(32, 0, 32)),
    dict(embed_dim=64, dim_split=(32, 32, 0)),
    dict(embed_dim=64, use_time=True, dim_split=(30, 34, 0)),
    dict(embed_dim=64, use_coords=True, dim_split=(40, 0, 20)),
])
def test_bad_split(kw):
    with pytest.raises(ValueError):
        EncodingConfig(**kw)


def test_plain_is_pure_positional():
    cfg = EncodingConfig(64)
    e = compose_token_embedding(cfg, (4, 4))
    assert np.array_equal(e, posembed_sincos_grid((4, 4), 64))


def test_segments_isolated():
    cfg = EncodingConfig(64, True, True)
    a = compose_token_embedding(cfg, (4, 4), utc(2010, 1, 1, 3), latlon_grid((0, 0), 32, 0.03), 8)
    b = compose_token_embedding(cfg, (4, 4), utc(2010, 1, 1, 3), latlon_grid((20, 10), 32, 0.03), 8)
    c = compose_token_embedding(cfg, (4, 4), utc(2010, 8, 1, 9), latlon_grid((0, 0), 32, 0.03), 8)
    assert np.array_equal(a[:, :48], b[:, :48]) and not np.allclose(a[:, 48:], b[:, 48:])
    assert np.array_equal(a[:, :32], c[:, :32]) and np.array_equal(a[:, 48:], c[:, 48:])
    assert not np.allclose(a[:, 32:48], c[:, 32:48])
    assert np.all(a[:, 32:48] == a[0, 32:48])


def test_missing_inputs():
    with pytest.raises(ValueError):
        compose_token_embedding(EncodingConfig(64, use_time=True), (4, 4))
    with pytest.raises(ValueError):
        compose_token_embedding(EncodingConfig(64, use_coords=True), (4, 4), utc(2010, 1, 1))


@settings(max_examples=60, deadline=None)
@given(lat=st.floats(-45, 45), lon=st.floats(-45, 45),
       seconds=st.integers(0, 10 * 365 * 86400), dim=st.sampled_from([16, 32, 64]))
def test_bounded_and_deterministic(lat, lon, seconds, dim):
    t = utc(2005, 1, 1) + timedelta(seconds=seconds)
    cfg = EncodingConfig(dim * 2, True, True, (dim, dim // 2, dim // 2))
    grid = latlon_grid((lat * 0.9, lon * 0.9), 16, 0.03)
    e = compose_token_embedding(cfg, (2, 2), t, grid, 8)
    assert np.all(np.abs(e) <= 1.0)
    assert np.array_equal(e, compose_token_embedding(cfg, (2, 2), t, grid, 8))
