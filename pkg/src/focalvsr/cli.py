"""Command-line entry point: ``focalvsr <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every output file is written atomically and every command is deterministic
for fixed inputs and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, media
from .blur_inference import binarize, estimate_blur_map
from .blur_synth import (
    ScheduleError,
    build_davis_blur,
    sample_schedule,
    synthesize_dataset,
)
from .config import ConfigError, PipelineConfig
from .fixtures import translating_scene
from .flow_prop import complete_flow_pair, propagate, translation_flows
from .metrics import evaluate
from .mgst import init_weights, load_weights, save_weights
from .pipeline import PipelineInputs, run_ablation, run_pipeline

log = logging.getLogger("focalvsr")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad combination of arguments detected after parsing."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, payload: dict) -> None:
    media.atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.jobs is not None:
        cfg.run.jobs = args.jobs
    cfg.validate()
    return cfg


def _path_arg(value, cfg_value, flag: str) -> Path:
    chosen = value if value is not None else cfg_value
    if chosen is None:
        raise UsageError(f"{flag} is required (or set it under [paths] in the config)")
    return Path(chosen)


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise media.MediaError(f"{what} directory not found: {path}")
    return path


def parse_translation(text: str) -> tuple[float, float]:
    """``translation=dx,dy`` -> (dx, dy)."""
    kind, _, rest = text.partition("=")
    if kind != "translation" or not rest:
        raise UsageError(f"--synthetic-flows expects translation=dx,dy, got {text!r}")
    try:
        dx, dy = (float(v) for v in rest.split(","))
    except ValueError:
        raise UsageError(f"--synthetic-flows expects translation=dx,dy, got {text!r}") from None
    return dx, dy


def _load_flows(args, n: int, hw: tuple[int, int]):
    """Returns (fwd, bwd, exact) or (None, None, False) when no flows were given."""
    if args.flows and args.synthetic_flows:
        raise UsageError("give either --flows or --synthetic-flows, not both")
    if args.synthetic_flows:
        dx, dy = parse_translation(args.synthetic_flows)
        fwd, bwd = translation_flows(n, hw[0], hw[1], dx, dy)
        return fwd, bwd, True
    if args.flows:
        root = _require_dir(Path(args.flows), "flow")
        fwd = media.load_flows(_require_dir(root / "forward", "forward flow"))
        bwd = media.load_flows(_require_dir(root / "backward", "backward flow"))
        for seq in (fwd, bwd):
            seq.check_pairs(n)
            if seq.hw != hw:
                raise media.DimensionMismatchError(f"flows {seq.hw} do not match frames {hw}")
        return fwd, bwd, False
    return None, None, False


def _weights(args, cfg):
    mcfg = cfg.mgst_config()
    weights = load_weights(args.weights) if args.weights else init_weights(mcfg, cfg.run.seed)
    weights.check(mcfg)
    return weights, mcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    frames_dir = _require_dir(_path_arg(args.frames, cfg.paths.frames, "--frames"), "frames")
    depth_dir = _require_dir(_path_arg(args.depth, cfg.paths.depth, "--depth"), "depth")
    out = _path_arg(args.out, cfg.paths.out, "--out")
    seq = media.load_frames(frames_dir)
    depths = media.load_depth(depth_dir)
    lr_factor = cfg.synth.lr_factor
    if args.davis_blur:
        if any(v is not None for v in (args.f0, args.f_r, args.df_dt, args.n_max)):
            raise UsageError("--davis-blur fixes f0, f_r, df_dt and n_max; drop the overrides")
        result = build_davis_blur(seq, depths, out, args.sequence_id, lr_factor, cfg.run.jobs)
    else:
        rng = np.random.default_rng(cfg.run.seed)
        sched = sample_schedule(rng, len(seq), cfg.schedule_bounds())
        overrides = {k: v for k, v in (("f0", args.f0), ("f_r", args.f_r), ("df_dt", args.df_dt),
                                       ("n_max", args.n_max)) if v is not None}
        sched = dataclasses.replace(sched, **overrides)
        result = synthesize_dataset(seq, depths, sched, out, args.sequence_id, lr_factor, cfg.run.jobs)
    s = result.schedule
    print(f"wrote {len(result.frames)} frames to {out} "
          f"(f0={s.f0:g}, f_r={s.f_r:g}, df_dt={s.df_dt:g}, n_max={s.n_max})")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    if args.levels is not None:
        cfg.estimate.levels = args.levels
    if args.depth_bins is not None:
        cfg.estimate.depth_bins = args.depth_bins
    if args.tau_b is not None:
        cfg.estimate.tau_b = args.tau_b
    cfg.validate()
    e = cfg.estimate
    frames = media.load_frames(_require_dir(_path_arg(args.frames, cfg.paths.frames, "--frames"), "frames"))
    depths = media.load_depth(_require_dir(_path_arg(args.depth, cfg.paths.depth, "--depth"), "depth"))
    out = _path_arg(args.out, cfg.paths.out, "--out")
    if len(frames) != len(depths) or frames.hw != depths.hw:
        raise media.DimensionMismatchError("frames and depth maps do not match")
    maps = np.stack([estimate_blur_map(f, d, e.levels, e.depth_bins)
                     for f, d in zip(frames.frames, depths.maps)])
    masks = np.stack([binarize(m, tol=e.tau_b) for m in maps])
    media.save_blur_maps(media.BlurMapSequence(maps), out / "blur_maps", scale=255.0)
    media.save_masks(media.MaskSequence(masks), out / "masks")
    _write_json(out / "estimate.json", {
        "levels": e.levels, "depth_bins": e.depth_bins, "tau_b": e.tau_b,
        "blur_map_scale": 255.0, "frames": len(frames),
        "masked_fraction": [float(m.mean()) for m in masks],
    })
    print(f"estimated {len(frames)} blur maps into {out}")
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = _load_config(args)
    if args.tau_c is not None:
        cfg.propagate.tau_c = args.tau_c
    cfg.validate()
    p = cfg.propagate
    frames = media.load_frames(_require_dir(_path_arg(args.frames, cfg.paths.frames, "--frames"), "frames"))
    masks = media.load_masks(_require_dir(Path(args.masks), "mask"))
    out = _path_arg(args.out, cfg.paths.out, "--out")
    if args.flows is None and cfg.paths.flows is not None and not args.synthetic_flows:
        args.flows = cfg.paths.flows
    fwd, bwd, exact = _load_flows(args, len(frames), frames.hw)
    if fwd is None:
        raise UsageError("propagate needs --flows DIR or --synthetic-flows translation=dx,dy")
    if not exact and not args.no_complete:
        fwd, bwd, kept_f, kept_b = complete_flow_pair(fwd, bwd, masks, p.flow_factor, p.fill_tol, p.fill_iters)
        if kept_f or kept_b:
            log.warning("fully masked frames keep their input flow (forward %s, backward %s)",
                        list(kept_f), list(kept_b))
    res = propagate(frames, masks, fwd, bwd, tau_c=p.tau_c)
    media.save_frames(res.frames, out / "frames")
    media.save_masks(res.masks, out / "masks")
    for t, prov in enumerate(res.provenance):
        # stored as source index + 1 so that 0 means "not propagated"
        media.atomic_write_bytes(out / "provenance" / media.frame_name(t),
                                 media._png_bytes((prov + 1).astype(np.uint16)))
    _write_json(out / "propagate.json", {
        "tau_c": p.tau_c, "frames": len(frames),
        "mask_area_before": [int(m.sum()) for m in masks.masks],
        "mask_area_after": [int(m.sum()) for m in res.masks.masks],
        "propagated_pixels": int((res.provenance >= 0).sum()),
    })
    before, after = int(masks.masks.sum()), int(res.masks.masks.sum())
    print(f"masked pixels {before} -> {after}; wrote {out}")
    return EXIT_OK


def _dataset_lr(path: Path) -> tuple[media.DatasetManifest, PipelineInputs]:
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise media.MediaError(f"no manifest.json in {path}")
    m = media.DatasetManifest.load(manifest_path)
    inputs = PipelineInputs(
        frames=media.load_frames(m.resolve("lr_frames")),
        masks=media.load_masks(m.resolve("lr_masks")),
        depth=media.load_depth(m.resolve("lr_depth")),
        blur_maps=media.load_blur_maps(m.resolve("lr_blur_maps"), scale=m.blur_map_scale),
    )
    return m, inputs


def _attach_flows(args, inputs: PipelineInputs) -> None:
    fwd, bwd, exact = _load_flows(args, len(inputs.frames), inputs.frames.hw)
    inputs.flows_fwd, inputs.flows_bwd = fwd, bwd
    inputs.complete = not exact and not args.no_complete


def cmd_forward(args) -> int:
    cfg = _load_config(args)
    if args.dataset:
        _, inputs = _dataset_lr(Path(args.dataset))
    else:
        if not (args.frames and args.depth and args.blur_maps):
            raise UsageError("forward needs --dataset, or --frames, --depth and --blur-maps")
        frames = media.load_frames(_require_dir(Path(args.frames), "frames"))
        blur = media.load_blur_maps(_require_dir(Path(args.blur_maps), "blur map"), scale=args.blur_scale)
        masks = (media.load_masks(_require_dir(Path(args.masks), "mask")) if args.masks
                 else media.MaskSequence(np.stack([binarize(b) for b in blur.maps])))
        inputs = PipelineInputs(frames, masks, media.load_depth(_require_dir(Path(args.depth), "depth")), blur)
    out = _path_arg(args.out, cfg.paths.out, "--out")
    _attach_flows(args, inputs)
    use_prop = inputs.flows_fwd is not None and not args.no_propagate
    weights, mcfg = _weights(args, cfg)
    if args.save_weights:
        save_weights(weights, args.save_weights)
    res = run_pipeline(inputs, weights, mcfg, use_propagation=use_prop, use_blur_maps=True,
                       tau_c=cfg.propagate.tau_c, flow_factor=cfg.propagate.flow_factor)
    fr = res.forward
    media.save_frames(media.FrameSequence(fr.frames), out / "frames")
    _write_json(out / "forward.json", {
        "input_shape": list(np.shape(inputs.frames.frames)),
        "output_shape": list(fr.frames.shape),
        "token_grid": list(fr.grid),
        "windows_per_block": fr.n_windows,
        "propagation": use_prop,
        "propagated_pixels": res.propagated_pixels,
        "blocks": [
            {"kv_frames": s.kv_frames, "active_windows": len(s.active_windows),
             "skipped_windows": len(s.skipped_windows), "max_row_sum_error": s.max_row_sum_error}
            for s in fr.block_stats
        ],
    })
    print(f"{tuple(np.shape(inputs.frames.frames))} -> {fr.frames.shape}; "
          f"skipped {fr.skipped_windows} of {fr.n_windows * len(fr.block_stats)} window passes")
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = media.load_frames(_require_dir(Path(args.pred), "prediction"))
    gt = media.load_frames(_require_dir(Path(args.gt), "ground-truth"))
    masks = media.load_masks(_require_dir(Path(args.masks), "mask")).masks if args.masks else None
    report = evaluate(pred.frames, gt.frames, masks)
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    manifest, inputs = _dataset_lr(Path(args.dataset))
    _attach_flows(args, inputs)
    if inputs.flows_fwd is None:
        raise UsageError("ablate needs --flows DIR or --synthetic-flows (LR pixel units)")
    gt = media.load_frames(_require_dir(Path(args.gt), "ground-truth"))
    hr_masks = media.load_masks(manifest.resolve("masks"))
    f = manifest.lr_factor
    th, tw = inputs.frames.hw[0] * 2, inputs.frames.hw[1] * 2
    if f != 2:
        raise media.MediaError(f"the forward pass upsamples 2x but the dataset LR factor is {f}")
    weights, mcfg = _weights(args, cfg)
    report = run_ablation(inputs, gt.frames[:, :th, :tw], hr_masks.masks[:, :th, :tw], weights, mcfg,
                          tau_c=cfg.propagate.tau_c, flow_factor=cfg.propagate.flow_factor)
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    print(report.table())
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    dx, dy = args.shift
    if args.height % 2 or args.width % 2:
        raise UsageError("--height and --width must be even so the LR flows are exact")
    sc = translating_scene(args.frames, args.height, args.width, (dx, dy), seed=args.seed)
    out = Path(args.out)
    media.save_frames(sc.frames, out / "frames")
    media.save_depth(sc.depth, out / "depth")
    media.save_flows(sc.flows_fwd, out / "flows" / "forward")
    media.save_flows(sc.flows_bwd, out / "flows" / "backward")
    lr_fwd, lr_bwd = translation_flows(args.frames, args.height // 2, args.width // 2, -dx / 2, -dy / 2)
    media.save_flows(lr_fwd, out / "flows_lr" / "forward")
    media.save_flows(lr_bwd, out / "flows_lr" / "backward")
    _write_json(out / "fixture.json", {
        "frames": args.frames, "height": args.height, "width": args.width,
        "shift": [dx, dy], "seed": args.seed,
        "forward_flow": [-dx, -dy], "forward_flow_lr": [-dx / 2, -dy / 2],
    })
    print(f"wrote {args.frames}-frame fixture to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _shift(text: str) -> tuple[int, int]:
    try:
        dx, dy = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dx,dy integers, got {text!r}") from None
    if dx < 0 or dy < 0:
        raise argparse.ArgumentTypeError("shift components must be non-negative")
    return dx, dy


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML pipeline configuration")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--jobs", type=_positive_int, help="worker threads (overrides [run] jobs)")
    common.add_argument("-v", "--verbose", action="store_true")

    flows = argparse.ArgumentParser(add_help=False)
    flows.add_argument("--flows", help="directory with forward/ and backward/ .flo files")
    flows.add_argument("--synthetic-flows", metavar="translation=DX,DY",
                       help="constant forward flow instead of flow files")
    flows.add_argument("--no-complete", action="store_true",
                       help="do not fill masked flow vectors before propagating")

    parser = argparse.ArgumentParser(prog="focalvsr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="synthesize a focal-blur dataset")
    p.add_argument("--frames", help="directory of sharp RGB frames")
    p.add_argument("--depth", help="directory of depth maps (16-bit or 8-bit PNG)")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--davis-blur", action="store_true",
                   help="benchmark recipe: f0=0, f_r=100, n_max=7, df_dt=max(D)/T")
    p.add_argument("--f0", type=float)
    p.add_argument("--f-r", dest="f_r", type=float)
    p.add_argument("--df-dt", dest="df_dt", type=float)
    p.add_argument("--n-max", dest="n_max", type=int, choices=(3, 5, 7, 9, 11))
    p.add_argument("--sequence-id", default="sequence")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", parents=[common], help="estimate blur maps and masks")
    p.add_argument("--frames")
    p.add_argument("--depth")
    p.add_argument("--out")
    p.add_argument("--levels", type=int)
    p.add_argument("--depth-bins", type=int)
    p.add_argument("--tau-b", type=float)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("propagate", parents=[common, flows], help="flow-guided pixel propagation")
    p.add_argument("--frames")
    p.add_argument("--masks", required=True)
    p.add_argument("--out")
    p.add_argument("--tau-c", type=float)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("forward", aliases=["dabit-forward"], parents=[common, flows],
                       help="propagate + sparse-transformer forward pass on an LR clip")
    p.add_argument("--dataset", help="synthesized dataset (uses its LR variants)")
    p.add_argument("--frames")
    p.add_argument("--depth")
    p.add_argument("--blur-maps")
    p.add_argument("--blur-scale", type=float, default=media.BLUR_MAP_SCALE)
    p.add_argument("--masks")
    p.add_argument("--no-propagate", action="store_true")
    p.add_argument("--weights", help="safetensors weight file (default: seeded init)")
    p.add_argument("--save-weights", help="write the weights used to this file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("metrics", parents=[common], help="PSNR / SSIM / tOF report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", parents=[common, flows], help="four-way propagation / blur-map ablation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gt", required=True, help="sharp HR frames")
    p.add_argument("--weights")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-fixture", parents=[common], help="write the translating test scene")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=_positive_int, default=10)
    p.add_argument("--height", type=_positive_int, default=240)
    p.add_argument("--width", type=_positive_int, default=432)
    p.add_argument("--shift", type=_shift, default=(4, 0))
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "make-fixture" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.exit(EXIT_USAGE, f"focalvsr {args.command}: error: {exc}\n")
    except (media.MediaError, ScheduleError, ValueError, OSError, KeyError, IndexError) as exc:
        print(f"focalvsr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
