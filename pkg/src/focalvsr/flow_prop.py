"""Flow warping, consistency checks, masked flow completion and image propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .media import (
    DimensionMismatchError,
    FlowSequence,
    FrameSequence,
    MaskSequence,
)


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _bilinear_taps(h: int, w: int, sx: np.ndarray, sy: np.ndarray):
    """Integer corner indices and weights for bilinear sampling at (sx, sy)."""
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    taps = (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    )
    return taps


def _sample(image: np.ndarray, taps) -> np.ndarray:
    out = None
    for yi, xi, wt in taps:
        v = image[yi, xi]
        term = v * (wt[..., None] if v.ndim > wt.ndim else wt)
        out = term if out is None else out + term
    return out


def sample_bilinear(image: np.ndarray, sx: np.ndarray, sy: np.ndarray, clamp: bool = True):
    """Bilinear lookup of ``image`` at float coordinates.

    With ``clamp`` the coordinates are pulled back onto the image; otherwise
    out-of-range positions still return a border-clamped value and the caller
    is expected to use the validity mask from :func:`warp`.
    """
    h, w = image.shape[:2]
    if clamp:
        sx = np.clip(sx, 0, w - 1)
        sy = np.clip(sy, 0, h - 1)
    return _sample(np.asarray(image, dtype=np.float64), _bilinear_taps(h, w, sx, sy))


def warp(image: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp: ``out(x) = image(x + flow(x))`` with bilinear sampling.

    Returns the warped image and a boolean validity map; samples falling
    outside the image are invalid and set to 0.
    """
    image = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = image.shape[:2]
    if flow.shape[:2] != (h, w):
        raise DimensionMismatchError(f"image {image.shape[:2]} and flow {flow.shape[:2]} differ")
    xs, ys = _grid(h, w)
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = sample_bilinear(image, sx, sy, clamp=True)
    out[~valid] = 0.0
    return out, valid


def fb_consistency(flow_fwd: np.ndarray, flow_bwd: np.ndarray) -> np.ndarray:
    """Round-trip error ``|F_fwd(x) + F_bwd(x + F_fwd(x))|``.

    ``flow_bwd`` is sampled bilinearly with border clamping.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape:
        raise DimensionMismatchError(f"flow shapes {flow_fwd.shape} and {flow_bwd.shape} differ")
    h, w = flow_fwd.shape[:2]
    xs, ys = _grid(h, w)
    back = sample_bilinear(flow_bwd, xs + flow_fwd[..., 0], ys + flow_fwd[..., 1])
    return np.linalg.norm(flow_fwd + back, axis=-1)


# ---------------------------------------------------------------------------
# flow completion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompletedFlows:
    flows: FlowSequence
    # indices of flows that had no unmasked vector and were zero-filled
    unfilled: tuple[int, ...] = ()


def _block_reduce(flow: np.ndarray, valid: np.ndarray, factor: int):
    h, w = valid.shape
    hb, wb = -(-h // factor), -(-w // factor)
    ph, pw = hb * factor - h, wb * factor - w
    f = np.pad(flow * valid[..., None], ((0, ph), (0, pw), (0, 0)))
    v = np.pad(valid.astype(np.float64), ((0, ph), (0, pw)))
    fsum = f.reshape(hb, factor, wb, factor, 2).sum(axis=(1, 3))
    vsum = v.reshape(hb, factor, wb, factor).sum(axis=(1, 3))
    known = vsum > 0
    small = np.zeros((hb, wb, 2))
    small[known] = fsum[known] / vsum[known][:, None]
    return small / factor, known


def diffuse_fill(
    field: np.ndarray, known: np.ndarray, tol: float = 1e-4, max_iter: int = 500
) -> np.ndarray:
    """Fill unknown cells by Jacobi iteration of the 4-neighbour average.

    Known cells are fixed; image borders act as reflecting (only in-grid
    neighbours are averaged). Stops when the largest update drops below
    ``tol`` or after ``max_iter`` sweeps.
    """
    field = np.array(field, dtype=np.float64)
    unknown = ~known
    if not unknown.any():
        return field
    if not known.any():
        field[:] = 0.0
        return field
    field[unknown] = field[known].mean(axis=0)
    h, w = known.shape
    count = np.zeros((h, w))
    count[1:, :] += 1
    count[:-1, :] += 1
    count[:, 1:] += 1
    count[:, :-1] += 1
    for _ in range(max_iter):
        acc = np.zeros_like(field)
        acc[1:, :] += field[:-1, :]
        acc[:-1, :] += field[1:, :]
        acc[:, 1:] += field[:, :-1]
        acc[:, :-1] += field[:, 1:]
        new = acc / count[..., None]
        delta = np.abs(new[unknown] - field[unknown]).max()
        field[unknown] = new[unknown]
        if delta < tol:
            break
    return field


def _upsample_flow(small: np.ndarray, factor: int, h: int, w: int) -> np.ndarray:
    hb, wb = small.shape[:2]
    ys = (np.arange(h) + 0.5) / factor - 0.5
    xs = (np.arange(w) + 0.5) / factor - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, hb - 1), np.clip(xs, 0, wb - 1), indexing="ij")
    out = np.empty((h, w, 2))
    for c in range(2):
        out[..., c] = map_coordinates(small[..., c], [yy, xx], order=1, mode="nearest")
    return out * factor


def complete_flows(
    flows: FlowSequence,
    masks: MaskSequence,
    factor: int = 8,
    tol: float = 1e-4,
    max_iter: int = 500,
) -> CompletedFlows:
    """Replace masked flow vectors using smooth diffusion at 1/``factor`` scale.

    ``masks[t]`` gates ``flows[t]`` (the mask of the source frame). Each low
    resolution cell averages the unmasked vectors of its block; cells with
    none are filled by :func:`diffuse_fill`, the result is upsampled
    bilinearly, and only masked vectors take the filled values.
    """
    if masks.hw != flows.hw:
        raise DimensionMismatchError(f"masks {masks.hw} and flows {flows.hw} differ")
    if len(masks) < len(flows):
        raise DimensionMismatchError(f"{len(flows)} flows but only {len(masks)} masks")
    h, w = flows.hw
    out = []
    unfilled = []
    for t, flow in enumerate(flows.flows):
        masked = masks.masks[t].astype(bool)
        if not masked.any():
            out.append(flow)
            continue
        valid = ~masked
        if not valid.any():
            unfilled.append(t)
            out.append(np.zeros_like(flow))
            continue
        small, known = _block_reduce(flow.astype(np.float64), valid, factor)
        small = diffuse_fill(small, known, tol, max_iter)
        dense = _upsample_flow(small, factor, h, w).astype(np.float32)
        out.append(np.where(masked[..., None], dense, flow))
    return CompletedFlows(FlowSequence(np.stack(out)), tuple(unfilled))


def complete_flow_pair(
    flows_fwd: FlowSequence,
    flows_bwd: FlowSequence,
    masks: MaskSequence,
    factor: int = 8,
    tol: float = 1e-4,
    max_iter: int = 500,
) -> tuple[FlowSequence, FlowSequence, tuple[int, ...], tuple[int, ...]]:
    """Complete both flow directions ahead of propagation.

    Forward flow t is gated by mask t and backward flow t by mask t+1. A flow
    whose source frame is masked everywhere has nothing to diffuse from;
    instead of the zero field :func:`complete_flows` reports for it, the input
    flow is kept so propagation can still chain through that frame. The
    indices kept this way are returned for each direction.
    """
    cf = complete_flows(flows_fwd, masks, factor, tol, max_iter)
    cb = complete_flows(flows_bwd, MaskSequence(masks.masks[1:]), factor, tol, max_iter)
    fwd = np.array(cf.flows.flows)
    bwd = np.array(cb.flows.flows)
    for t in cf.unfilled:
        fwd[t] = flows_fwd.flows[t]
    for t in cb.unfilled:
        bwd[t] = flows_bwd.flows[t]
    return FlowSequence(fwd), FlowSequence(bwd), cf.unfilled, cb.unfilled


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropagationResult:
    frames: FrameSequence
    masks: MaskSequence
    # frame index each pixel was copied from, -1 where untouched
    provenance: np.ndarray


def _propagate_step(dst, dst_mask, src, src_mask, flow_to_src, flow_back, tau_c):
    """Fill masked pixels of ``dst`` from ``src``; returns the changed-pixel map."""
    h, w = dst_mask.shape
    masked = dst_mask.astype(bool)
    if not masked.any():
        return np.zeros((h, w), dtype=bool), None
    xs, ys = _grid(h, w)
    sx = xs + flow_to_src[..., 0]
    sy = ys + flow_to_src[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    taps = _bilinear_taps(h, w, np.clip(sx, 0, w - 1), np.clip(sy, 0, h - 1))
    # every bilinear tap that contributes must be unmasked in the source
    src_ok = np.ones((h, w), dtype=bool)
    for yi, xi, wt in taps:
        src_ok &= (wt <= 0) | (src_mask[yi, xi] == 0)
    err = fb_consistency(flow_to_src, flow_back)
    take = masked & inside & src_ok & (err < tau_c)
    values = _sample(src, taps)
    return take, values


def propagate(
    frames: FrameSequence,
    masks: MaskSequence,
    flows_fwd: FlowSequence,
    flows_bwd: FlowSequence,
    tau_c: float = 1.0,
) -> PropagationResult:
    """Bidirectional propagation of in-focus pixels along flow.

    ``flows_fwd[t]`` maps frame t to t+1 and ``flows_bwd[t]`` maps frame t+1 to
    t. The backward pass (t = T-2 .. 0) fills frame t from frame t+1, then the
    forward pass (t = 1 .. T-1) fills frame t from frame t-1. A masked pixel
    is replaced when all its bilinear source taps are unmasked and its
    forward-backward error is below ``tau_c``; its mask bit then clears so the
    value can travel further along the pass.
    """
    t_len = len(frames)
    if t_len < 2:
        raise ValueError("propagation needs at least two frames")
    if len(masks) != t_len or masks.hw != frames.hw:
        raise DimensionMismatchError("masks do not match frames")
    flows_fwd.check_pairs(t_len)
    flows_bwd.check_pairs(t_len)
    if flows_fwd.hw != frames.hw or flows_bwd.hw != frames.hw:
        raise DimensionMismatchError("flows do not match frames")

    out = np.array(frames.frames)
    mk = np.array(masks.masks)
    prov = np.full(mk.shape, -1, dtype=np.int64)
    fwd = flows_fwd.flows.astype(np.float64)
    bwd = flows_bwd.flows.astype(np.float64)

    def apply(dst, src, flow_to_src, flow_back):
        take, values = _propagate_step(out[dst], mk[dst], out[src], mk[src], flow_to_src, flow_back, tau_c)
        if values is None or not take.any():
            return
        out[dst][take] = values[take]
        mk[dst][take] = 0
        prov[dst][take] = src

    for t in range(t_len - 2, -1, -1):
        apply(t, t + 1, fwd[t], bwd[t])
    for t in range(1, t_len):
        apply(t, t - 1, bwd[t - 1], fwd[t - 1])

    np.clip(out, 0.0, 1.0, out=out)
    return PropagationResult(FrameSequence(out), MaskSequence(mk), prov)


def query_global_references(
    frames: FrameSequence,
    masks: MaskSequence,
    clip: tuple[int, ...] | list[int],
    refs: tuple[int, ...] | list[int],
) -> tuple[FrameSequence, MaskSequence, tuple[int, ...]]:
    """Gather the local clip followed by the reference frames, in that order.

    Returns the gathered frames, masks and the source index of each entry.
    """
    n = len(frames)
    clip = [int(i) for i in clip]
    refs = [int(i) for i in refs]
    if len(masks) != n:
        raise DimensionMismatchError(f"{n} frames but {len(masks)} masks")
    for i in clip + refs:
        if not 0 <= i < n:
            raise IndexError(f"frame index {i} outside [0, {n})")
    if len(set(refs)) != len(refs):
        raise ValueError(f"duplicate reference indices {refs}")
    collide = set(refs) & set(clip)
    if collide:
        raise ValueError(f"reference indices {sorted(collide)} overlap the clip")
    order = clip + refs
    return (
        FrameSequence(frames.frames[order]),
        MaskSequence(masks.masks[order]),
        tuple(order),
    )


def translation_flows(n_frames: int, h: int, w: int, dx: float, dy: float) -> tuple[FlowSequence, FlowSequence]:
    """Constant forward flow (dx, dy) and its exact inverse."""
    fwd = np.zeros((n_frames - 1, h, w, 2), dtype=np.float32)
    fwd[..., 0] = dx
    fwd[..., 1] = dy
    return FlowSequence(fwd), FlowSequence(-fwd)
