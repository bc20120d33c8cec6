from __future__ import annotations

import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalvsr import mgst
from focalvsr.mgst import (
    MGSTConfig,
    PatchGeometry,
    block_stack_forward,
    build_query_mask,
    init_weights,
    model_forward,
    partition_windows,
    pixel_shuffle,
    pixel_unshuffle,
    select_kv_frames,
    soft_comp,
    soft_split,
)

SMALL = MGSTConfig(embed_dim=16, heads=2, blocks=2)


# --- patches --------------------------------------------------------------

def test_grid_shape_formula():
    assert PatchGeometry().grid_shape(30, 54) == (10, 18)
    assert PatchGeometry().grid_shape(60, 108) == (20, 36)


def test_soft_split_comp_inverse(rng):
    x = rng.normal(size=(2, 20, 31, 4))
    np.testing.assert_allclose(soft_comp(soft_split(x)), x, atol=1e-12)


def test_constant_features_give_constant_tokens():
    grid = soft_split(np.full((1, 9, 9, 2), 0.25))
    assert np.all(grid.tokens == 0.25)


def test_query_mask_zero_for_in_focus_clip():
    q = build_query_mask(np.zeros((3, 40, 64)), (10, 16))
    assert q.shape == PatchGeometry().grid_shape(10, 16) and not q.any()


def test_query_mask_pools_over_frames_and_footprint():
    blur = np.zeros((3, 40, 64))
    blur[2, 0, 0] = 5.0  # one pixel in the last frame
    q = build_query_mask(blur, (10, 16))
    # feature (0, 0) is read by tokens whose footprint starts at row/col <= 0
    assert q[0, 0] == 5.0 and q[0, 1] == 5.0 and q.sum() == 5.0 * 2 * 2


# --- windows and key/value selection --------------------------------------

@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 30), n=st.integers(1, 40))
def test_windows_tile_grid_exactly_once(m, n):
    cover = np.zeros((m, n), int)
    for w in partition_windows((m, n)):
        cover[w.rows, w.cols] += 1
        assert w.kv_rows.start <= w.rows.start and w.kv_rows.stop >= w.rows.stop
        assert w.kv_cols.start <= w.cols.start and w.kv_cols.stop >= w.cols.stop
    assert np.all(cover == 1)


def test_expanded_window_bounds():
    wins = partition_windows((10, 18))
    assert len(wins) == 4
    w = wins[0]
    assert (w.kv_rows, w.kv_cols) == (slice(0, 7), slice(0, 13))
    w = wins[3]
    assert (w.kv_rows, w.kv_cols) == (slice(3, 10), slice(5, 18))


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 40), b=st.integers(0, 16))
def test_kv_count_is_half_rounded_up(t, b):
    idx = select_kv_frames(t, b)
    assert len(idx) == math.ceil(t / 2)
    assert len(set(idx)) == len(idx) and all(0 <= i < t for i in idx)


def test_kv_alternates_parity():
    assert select_kv_frames(6, 0) == [0, 2, 4]
    assert select_kv_frames(6, 1) == [1, 3, 5]
    assert select_kv_frames(5, 1) == [0, 1, 3]
    assert sorted(set(select_kv_frames(7, 0)) | set(select_kv_frames(7, 1))) == list(range(7))


# --- pixel shuffle --------------------------------------------------------

def test_pixel_shuffle_oracle():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = np.array([[[a, b, c, d]]])
    np.testing.assert_array_equal(pixel_shuffle(x, 2), [[[a], [b]], [[c], [d]]])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), s=st.sampled_from([1, 2, 3]), c=st.integers(1, 3))
def test_unshuffle_inverts_shuffle_bitwise(seed, s, c):
    x = np.random.default_rng(seed).normal(size=(2, 3, 4, c * s * s))
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(x, s), s), x)
    y = np.random.default_rng(seed).normal(size=(2, 3 * s, 2 * s, c))
    assert np.array_equal(pixel_shuffle(pixel_unshuffle(y, s), s), y)


def test_shuffle_rejects_bad_channels():
    with pytest.raises(ValueError):
        pixel_shuffle(np.zeros((2, 2, 3)), 2)


# --- blocks ---------------------------------------------------------------

def test_zero_mask_skips_every_window(rng):
    w = init_weights(SMALL, 0)
    tokens = rng.normal(size=(4, 10, 18, SMALL.embed_dim))
    out, stats = block_stack_forward(tokens, np.zeros((10, 18)), w, SMALL)
    assert np.array_equal(out, tokens)
    assert all(len(s.active_windows) == 0 for s in stats)


def test_softmax_rows_and_kv_frames(rng):
    w = init_weights(SMALL, 0)
    tokens = rng.normal(size=(5, 10, 18, SMALL.embed_dim))
    _, stats = block_stack_forward(tokens, np.ones((10, 18)), w, SMALL)
    for b, s in enumerate(stats):
        assert s.max_row_sum_error <= 1e-6
        assert s.kv_frames == select_kv_frames(5, b)
        assert len(s.skipped_windows) == 0
    # expanded window (7 x 13) per kv frame plus one global token each
    assert stats[0].kv_tokens == 3 * (7 * 13 + 1)


def test_active_windows_match_geometric_oracle():
    cfg = SMALL
    t, h, w = 2, 120, 216
    blur = np.zeros((t, h, w))
    blur[1, 60:80, 150:170] = 3.0
    # independent oracle: a token is blurred when its clamped 7x7 feature footprint
    # (stride 3, pad 3) touches a feature cell whose 4x4 input block has blur
    fh, fw = h // 4, w // 4
    cell = blur.max(axis=0).reshape(fh, 4, fw, 4).max(axis=(1, 3)) > 0
    m, n = PatchGeometry().grid_shape(fh, fw)
    hot = np.zeros((m, n), bool)
    for i in range(m):
        for j in range(n):
            r0, r1 = max(3 * i - 3, 0), min(3 * i + 3, fh - 1)
            c0, c1 = max(3 * j - 3, 0), min(3 * j + 3, fw - 1)
            hot[i, j] = cell[r0 : r1 + 1, c0 : c1 + 1].any()
    expected = [k for k, win in enumerate(partition_windows((m, n))) if hot[win.rows, win.cols].any()]

    frames = np.full((t, h, w, 3), 0.5)
    res = model_forward(frames, (blur > 0).astype(np.uint8), np.zeros((t, h, w)), blur, init_weights(cfg, 1), cfg)
    assert res.block_stats[0].active_windows == expected
    assert 0 < len(expected) < res.n_windows


def test_model_forward_shape_and_identity_for_in_focus(rng):
    frames = rng.random((3, 40, 56, 3))
    zeros = np.zeros((3, 40, 56))
    res = model_forward(frames, zeros.astype(np.uint8), zeros, zeros, init_weights(SMALL, 0), SMALL)
    assert res.frames.shape == (3, 80, 112, 3)
    assert res.skipped_windows == res.n_windows * SMALL.blocks
    assert res.frames.min() >= 0 and res.frames.max() <= 1


def test_model_forward_is_deterministic(rng):
    frames = rng.random((2, 24, 40, 3))
    blur = np.ones((2, 24, 40))
    w = init_weights(SMALL, 3)
    a = model_forward(frames, blur.astype(np.uint8), blur * 100, blur, w, SMALL).frames
    b = model_forward(frames, blur.astype(np.uint8), blur * 100, blur, w, SMALL).frames
    assert np.array_equal(a, b)


def test_model_forward_shape_mismatch(rng):
    with pytest.raises(mgst.DimensionMismatchError):
        model_forward(rng.random((2, 8, 8, 3)), np.zeros((2, 8, 9)), np.zeros((2, 8, 8)),
                      np.zeros((2, 8, 8)), init_weights(SMALL, 0), SMALL)


# --- weights --------------------------------------------------------------

def test_weights_roundtrip_and_container_layout(tmp_path):
    w = init_weights(SMALL, 5)
    path = tmp_path / "w.safetensors"
    mgst.save_weights(w, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen])
    assert header["encoder"]["dtype"] == "F64"
    assert header["encoder"]["shape"] == [SMALL.in_channels, SMALL.feature_channels]
    back = mgst.load_weights(path)
    for k, v in w.to_tensors().items():
        assert np.array_equal(back.to_tensors()[k], v)


def test_weights_check_rejects_wrong_config():
    w = init_weights(SMALL, 0)
    with pytest.raises(Exception):
        w.check(MGSTConfig(embed_dim=32, heads=2, blocks=2))
