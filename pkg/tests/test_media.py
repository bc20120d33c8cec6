from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from focalvsr import media
from focalvsr.media import (
    BlurMapSequence,
    DatasetManifest,
    DepthSequence,
    FlowSequence,
    FrameSequence,
    MaskSequence,
)


def test_sequences_are_read_only(rng):
    seq = FrameSequence(rng.random((2, 4, 5, 3)))
    with pytest.raises(ValueError):
        seq.frames[0, 0, 0, 0] = 1.0
    assert len(seq) == 2 and seq.hw == (4, 5)


def test_frame_range_is_checked():
    with pytest.raises(media.MediaError):
        FrameSequence(np.full((1, 2, 2, 3), 1.5))
    with pytest.raises(media.MediaError):
        DepthSequence(np.full((1, 2, 2), 300.0))


def test_empty_input_rejected():
    with pytest.raises(media.EmptyInputError):
        FrameSequence(np.zeros((0, 2, 2, 3)))


def test_flow_pair_count():
    flows = FlowSequence(np.zeros((3, 4, 4, 2), np.float32))
    flows.check_pairs(4)
    with pytest.raises(media.FlowLengthError):
        flows.check_pairs(5)


def test_frames_png_roundtrip(tmp_path, rng):
    data = np.round(rng.random((3, 6, 7, 3)) * 255) / 255
    media.save_frames(FrameSequence(data), tmp_path)
    back = media.load_frames(tmp_path)
    np.testing.assert_array_equal(back.frames, data)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["00000.png", "00001.png", "00002.png"]


def test_depth_16bit_roundtrip(tmp_path):
    depth = np.tile(np.linspace(0, 255, 11), (2, 5, 1))
    media.save_depth(DepthSequence(depth), tmp_path)
    back = media.load_depth(tmp_path)
    # 16-bit quantization step is 255/65535
    np.testing.assert_allclose(back.maps, depth, atol=255 / 65535)


def test_blur_map_roundtrip_is_lossless_for_kernel_sizes(tmp_path):
    maps = np.zeros((2, 4, 4))
    maps[0, :, 2:] = 7
    maps[1, 1, :] = 11
    media.save_blur_maps(BlurMapSequence(maps), tmp_path)
    np.testing.assert_array_equal(media.load_blur_maps(tmp_path).maps, maps)


def test_blur_map_overflow_rejected(tmp_path):
    with pytest.raises(media.MediaError):
        media.save_blur_maps(BlurMapSequence(np.full((1, 2, 2), 13.0)), tmp_path)


def test_masks_roundtrip(tmp_path, rng):
    m = (rng.random((2, 5, 5)) > 0.5).astype(np.uint8)
    media.save_masks(MaskSequence(m), tmp_path)
    np.testing.assert_array_equal(media.load_masks(tmp_path).masks, m)


def test_mixed_sizes_rejected(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "00000.png")
    Image.fromarray(np.zeros((4, 5, 3), np.uint8)).save(tmp_path / "00001.png")
    with pytest.raises(media.DimensionMismatchError):
        media.load_frames(tmp_path)


def test_empty_dir_rejected(tmp_path):
    with pytest.raises(media.EmptyInputError):
        media.load_frames(tmp_path)


# --- .flo -----------------------------------------------------------------

def test_flo_header_layout():
    flow = np.zeros((2, 3, 2), np.float32)
    flow[..., 0] = 1.5
    raw = media.encode_flo(flow)
    assert raw[:4] == b"PIEH"
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [3, 2]
    assert len(raw) == 12 + 2 * 3 * 2 * 4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
              elements=st.floats(-100, 100, width=32)))
def test_flo_roundtrip_property(flow):
    np.testing.assert_array_equal(media.decode_flo(media.encode_flo(flow)), flow)


def test_flo_truncated_and_trailing():
    raw = media.encode_flo(np.ones((2, 2, 2), np.float32))
    with pytest.raises(media.FlowLengthError):
        media.decode_flo(raw[:-1])
    with pytest.raises(media.FlowLengthError):
        media.decode_flo(raw + b"\0")
    with pytest.raises(media.FlowFormatError):
        media.decode_flo(b"XXXX" + raw[4:])


def test_flow_dir_roundtrip(tmp_path, rng):
    flows = FlowSequence(rng.normal(size=(3, 4, 5, 2)).astype(np.float32))
    media.save_flows(flows, tmp_path)
    np.testing.assert_array_equal(media.load_flows(tmp_path).flows, flows.flows)


# --- transforms -----------------------------------------------------------

def test_horizontal_flip_negates_dx():
    f = np.zeros((1, 2, 3, 2), np.float32)
    f[0, :, 0] = (2.0, 3.0)
    out = media.horizontal_flip(FlowSequence(f)).flows
    np.testing.assert_array_equal(out[0, :, 2], [[-2.0, 3.0]] * 2)


def test_temporal_reverse_orders_and_negates(rng):
    frames = FrameSequence(rng.random((3, 2, 2, 3)))
    np.testing.assert_array_equal(media.temporal_reverse(frames).frames, frames.frames[::-1])
    flows = FlowSequence(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
    np.testing.assert_array_equal(media.temporal_reverse(flows).flows, -flows.flows[::-1])


def test_double_flip_is_identity(rng):
    frames = FrameSequence(rng.random((2, 3, 4, 3)))
    np.testing.assert_array_equal(media.horizontal_flip(media.horizontal_flip(frames)).frames, frames.frames)


def test_downsample_shapes_and_flow_scaling():
    frames = FrameSequence(np.full((2, 8, 12, 3), 0.5))
    assert media.downsample(frames, 2).hw == (4, 6)
    flows = FlowSequence(np.full((1, 8, 12, 2), 4.0, np.float32))
    np.testing.assert_allclose(media.downsample(flows, 2).flows, 2.0)
    masks = MaskSequence(np.ones((1, 8, 12), np.uint8))
    assert media.downsample(masks, 4).hw == (2, 3)
    with pytest.raises(media.DimensionMismatchError):
        media.downsample(frames, 5)


# --- manifest -------------------------------------------------------------

def _manifest(root):
    return DatasetManifest(
        sequence_id="s", frames=["frames/00000.png"], depth=["depth/00000.png"],
        blur_maps=["blur_maps/00000.png"], masks=["masks/00000.png"],
        schedule={"f0": 0.0}, focal_points=[1.0], root=root,
    )


def test_manifest_json_roundtrip(tmp_path):
    m = _manifest(tmp_path)
    back = DatasetManifest.from_dict(json.loads(m.to_json()))
    assert back == m
    assert json.loads(m.to_json())["schema_version"] == 1


def test_manifest_detects_missing_files(tmp_path):
    m = _manifest(tmp_path)
    m.save(tmp_path / "manifest.json")
    with pytest.raises(media.MediaError):
        DatasetManifest.load(tmp_path / "manifest.json")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    media.atomic_write_bytes(tmp_path / "a" / "x.bin", b"123")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.bin"]
