"""Deterministic synthetic scenes used by the tests, the CLI and the demos.

Nothing here needs external data: textures are seeded multi-scale noise and
depth layouts are simple planes, so every fixture is reproducible from its
seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .flow_prop import translation_flows
from .media import DepthSequence, FlowSequence, FrameSequence


def texture(rng: np.random.Generator, h: int, w: int, channels: int = 3) -> np.ndarray:
    """Multi-scale noise texture in [0.05, 0.95] with strong fine detail."""
    out = np.zeros((h, w, channels))
    for scale, amp in ((1, 0.6), (2, 0.5), (4, 0.35), (16, 0.25)):
        sh, sw = -(-h // scale), -(-w // scale)
        noise = rng.uniform(-1.0, 1.0, size=(sh, sw, channels))
        if scale > 1:
            noise = cv2.resize(noise, (w, h), interpolation=cv2.INTER_NEAREST if scale < 4 else cv2.INTER_LINEAR)
            noise = noise.reshape(h, w, channels)
        out += amp * noise
    out -= out.min()
    out /= out.max()
    return 0.05 + 0.9 * out


def two_band_depth(h: int, w: int, near: float = 0.0, far: float = 255.0, split: int | None = None) -> np.ndarray:
    """Left columns at ``near`` depth, right columns at ``far``."""
    split = w // 2 if split is None else split
    d = np.full((h, w), float(near))
    d[:, split:] = float(far)
    return d


def layered_depth(h: int, w: int, levels=(20.0, 90.0, 160.0, 235.0)) -> np.ndarray:
    """Vertical strips of constant depth, one per entry of ``levels``."""
    d = np.empty((h, w))
    edges = np.linspace(0, w, len(levels) + 1).astype(int)
    for lo, hi, v in zip(edges[:-1], edges[1:], levels):
        d[:, lo:hi] = v
    return d


@dataclass(frozen=True)
class TranslatingScene:
    frames: FrameSequence
    depth: DepthSequence
    flows_fwd: FlowSequence
    flows_bwd: FlowSequence
    shift: tuple[int, int]


def translating_scene(
    n_frames: int = 10,
    h: int = 240,
    w: int = 432,
    shift: tuple[int, int] = (4, 0),
    near: float = 30.0,
    far: float = 220.0,
    seed: int = 0,
) -> TranslatingScene:
    """A textured plane pair panning by a constant integer ``shift`` per frame.

    Frame t shows canvas(x + t * shift): content moves by ``-shift`` each
    frame, so the forward flow is exactly ``-shift`` and the backward flow
    ``+shift``. The left half of the canvas sits at depth ``near`` and the
    right half at ``far``, which makes a near-to-far focus sweep blur the two
    halves in complementary frames.
    """
    sx, sy = shift
    if sx < 0 or sy < 0:
        raise ValueError("shift components must be non-negative")
    rng = np.random.default_rng(seed)
    ch, cw = h + sy * (n_frames - 1), w + sx * (n_frames - 1)
    canvas = texture(rng, ch, cw)
    depth_canvas = two_band_depth(ch, cw, near, far)
    frames = np.stack([canvas[t * sy : t * sy + h, t * sx : t * sx + w] for t in range(n_frames)])
    depth = np.stack([depth_canvas[t * sy : t * sy + h, t * sx : t * sx + w] for t in range(n_frames)])
    fwd, bwd = translation_flows(n_frames, h, w, -sx, -sy)
    return TranslatingScene(FrameSequence(frames), DepthSequence(depth), fwd, bwd, shift)
