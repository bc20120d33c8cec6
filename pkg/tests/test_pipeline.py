from __future__ import annotations

import numpy as np
import pytest

from focalvsr.blur_synth import build_davis_blur
from focalvsr.flow_prop import translation_flows
from focalvsr.mgst import MGSTConfig, init_weights
from focalvsr.pipeline import ABLATION_VARIANTS, PipelineInputs, run_ablation, run_pipeline

SMALL = MGSTConfig(embed_dim=16, heads=2, blocks=2)


@pytest.fixture(scope="module")
def lr_inputs(small_scene):
    res = build_davis_blur(small_scene.frames, small_scene.depth)
    fwd, bwd = translation_flows(len(res.frames), 60, 108, -2.0, 0.0)
    return res, PipelineInputs(res.lr_frames, res.lr_masks, res.lr_depth, res.lr_blur_maps, fwd, bwd,
                               complete=False)


def test_variant_order():
    assert [(v.propagation, v.blur_maps) for v in ABLATION_VARIANTS] == [
        (False, False), (True, False), (False, True), (True, True)]


def test_pipeline_requires_flows_for_propagation(lr_inputs):
    res, inp = lr_inputs
    bare = PipelineInputs(inp.frames, inp.masks, inp.depth, inp.blur_maps)
    with pytest.raises(ValueError):
        run_pipeline(bare, init_weights(SMALL, 0), SMALL, use_propagation=True)


def test_propagation_clears_lr_masks(lr_inputs):
    _, inp = lr_inputs
    out = run_pipeline(inp, init_weights(SMALL, 0), SMALL)
    assert out.masks_in.sum() == 0 and out.propagated_pixels == int(inp.masks.masks.sum())
    assert out.forward.frames.shape == (8, 120, 216, 3)


def test_ablation_rows_and_directions(lr_inputs, small_scene):
    res, inp = lr_inputs
    report = run_ablation(inp, small_scene.frames.frames, res.masks.masks, init_weights(SMALL, 0), SMALL)
    names = [r.name for r in report.rows]
    assert names == [v.name for v in ABLATION_VARIANTS]
    full, no_prop = report.row("full"), report.row("w/o propagation")
    assert full.masked_psnr > no_prop.masked_psnr
    assert report.row("w/o blur maps").skipped_windows == 0
    assert full.delta_psnr == 0.0
    assert "variant" in report.table() and len(report.to_dict()["rows"]) == 4
