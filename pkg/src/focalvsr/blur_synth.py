"""Depth-dependent focal blur: kernels, focus schedules and dataset builders."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import media
from .blur_inference import binarize
from .media import (
    BlurMapSequence,
    DatasetManifest,
    DepthSequence,
    FrameSequence,
    MaskSequence,
)

DEPTH_MIN = 0.0
DEPTH_MAX = 255.0
N_MAX_CHOICES = (3, 5, 7, 9, 11)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FocusSchedule:
    """Parameters of one synthetic focus pull.

    The focal point of frame ``t`` (1-based, ``t = 1..l``) is
    ``f0 + t * df_dt`` clamped to [0, 255]. When ``f_end`` is given the same
    line is evaluated as an interpolation between ``f0`` and ``f_end`` (with
    ``f_end = f0 + length * df_dt``), which lands exactly on ``f_end`` at
    ``t = length`` instead of being off by rounding.
    """

    f0: float
    f_r: float
    df_dt: float
    n_max: int
    sigma: float = 5.0
    length: int = 1
    ref_count: int = 0
    f_end: float | None = None

    def __post_init__(self):
        if self.n_max % 2 == 0 or not 3 <= self.n_max <= 11:
            raise ScheduleError(f"n_max must be odd in [3, 11], got {self.n_max}")
        if self.f_r < 0:
            raise ScheduleError(f"f_r must be >= 0, got {self.f_r}")
        if self.length < 1:
            raise ScheduleError(f"length must be >= 1, got {self.length}")
        if self.sigma <= 0:
            raise ScheduleError(f"sigma must be > 0, got {self.sigma}")
        if self.ref_count < 0:
            raise ScheduleError(f"ref_count must be >= 0, got {self.ref_count}")

    def focal_point(self, t: int) -> float:
        if self.f_end is None:
            f = self.f0 + t * self.df_dt
        else:
            s = t / self.length
            f = (1.0 - s) * self.f0 + s * self.f_end
        return float(np.clip(f, DEPTH_MIN, DEPTH_MAX))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FocusSchedule":
        return cls(**data)


def gaussian_kernel(n: int, sigma: float) -> np.ndarray:
    """n x n Gaussian weights at integer offsets, renormalized to unit sum."""
    if int(n) != n or n < 1 or n % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {n}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    g = _gaussian_1d(int(n), sigma)
    return np.outer(g, g)


def _gaussian_1d(n: int, sigma: float) -> np.ndarray:
    # exp(-(x^2+y^2)/2s^2) factorizes, so the normalized 2-D kernel is the
    # outer product of normalized 1-D kernels.
    half = (n - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def snap_odd(raw):
    """Round to the nearest odd integer (ties upward); results below 3 become 0."""
    raw = np.asarray(raw, dtype=np.float64)
    snapped = 2.0 * np.floor(raw / 2.0) + 1.0
    return np.where(snapped < 3.0, 0.0, snapped)


def blur_size_at_depth(
    d,
    f: float,
    f_r: float,
    n_max: int,
    d_min: float = DEPTH_MIN,
    d_max: float = DEPTH_MAX,
):
    """Kernel size for depth ``d`` (scalar or array).

    Zero inside the focal range ``|d - f| <= f_r / 2``; beyond it the size grows
    linearly with the excess distance, reaching ``n_max`` at the farthest depth
    attainable in ``[d_min, d_max]``, then snaps to an odd size.
    """
    if f_r < 0:
        raise ScheduleError(f"f_r must be >= 0, got {f_r}")
    d = np.asarray(d, dtype=np.float64)
    half = f_r / 2.0
    excess = np.abs(d - f) - half
    reach = max(abs(d_min - f), abs(d_max - f)) - half
    if reach <= 0:
        out = np.zeros_like(d)
    else:
        raw = n_max * np.clip(excess, 0.0, None) / reach
        out = np.where(excess > 0, snap_odd(np.minimum(raw, n_max)), 0.0)
    return float(out) if out.ndim == 0 else out


def _normalized_blur(
    frame: np.ndarray, support: np.ndarray, g: np.ndarray
) -> np.ndarray:
    # Gaussian-weighted mean over ``support`` pixels only (zero padding outside
    # the image, renormalized), so excluded pixels never leak into the result.
    weight = support.astype(np.float64)
    num = frame * weight[..., None]
    den = weight
    for axis in (0, 1):
        num = correlate1d(num, g, axis=axis, mode="constant")
        den = correlate1d(den, g, axis=axis, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den[..., None]


def render_focal_blur(
    frame: np.ndarray,
    depth_map: np.ndarray,
    f: float,
    f_r: float,
    n_max: int,
    sigma: float = 5.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Blur one frame according to its depth map.

    Depth is split into bands of equal kernel size on each side of the focal
    range. Bands are composited from far to near; each band is rendered as the
    normalized Gaussian average over pixels of that band and everything behind
    it, so nearer content never bleeds into a blurred background. In-focus
    pixels are copied from the input unchanged.

    Returns the blurred frame and the blur map (kernel size per pixel).
    """
    frame = np.asarray(frame, dtype=np.float64)
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if frame.shape[:2] != depth_map.shape:
        raise media.DimensionMismatchError(
            f"frame {frame.shape[:2]} and depth {depth_map.shape} differ"
        )
    sizes = blur_size_at_depth(depth_map, f, f_r, n_max)
    out = frame.copy()
    side = np.sign(depth_map - f)
    bands = []
    for n in np.unique(sizes[sizes > 0]):
        for s in (-1.0, 1.0):
            member = (sizes == n) & (side == s)
            if member.any():
                bands.append((float(depth_map[member].min()), int(n), member))
    # far to near
    bands.sort(key=lambda b: -b[0])
    for lower_depth, n, member in bands:
        support = depth_map >= lower_depth
        blurred = _normalized_blur(frame, support, _gaussian_1d(n, sigma))
        out[member] = blurred[member]
    np.clip(out, 0.0, 1.0, out=out)
    return out, sizes


def focal_points(sched: FocusSchedule, n_frames: int, time_indices=None) -> list[float]:
    times = np.arange(1, n_frames + 1) if time_indices is None else np.asarray(time_indices)
    return [sched.focal_point(int(t)) for t in times]


@dataclass
class SynthResult:
    frames: FrameSequence
    blur_maps: BlurMapSequence
    masks: MaskSequence
    schedule: FocusSchedule
    focal_points: list[float]
    lr_factor: int = 2
    lr_frames: FrameSequence | None = None
    lr_depth: DepthSequence | None = None
    lr_blur_maps: BlurMapSequence | None = None
    lr_masks: MaskSequence | None = None
    manifest: DatasetManifest | None = None


def synthesize_sequence(
    seq: FrameSequence,
    depths: DepthSequence,
    sched: FocusSchedule,
    time_indices=None,
    jobs: int = 1,
) -> tuple[FrameSequence, BlurMapSequence, MaskSequence]:
    """Blur a sequence with a temporally varying focal point.

    ``time_indices`` gives the 1-based schedule time of each frame (default
    ``1..T``); reference frames outside a clip pass their own offsets.
    Masks mark exactly the pixels whose kernel size is non-zero.
    """
    if len(seq) != len(depths):
        raise media.DimensionMismatchError(f"{len(seq)} frames but {len(depths)} depth maps")
    if seq.hw != depths.hw:
        raise media.DimensionMismatchError(f"frames {seq.hw} and depth {depths.hw} differ")
    if sched.length > len(seq):
        raise ScheduleError(f"clip length {sched.length} exceeds sequence length {len(seq)}")
    fps = focal_points(sched, len(seq), time_indices)

    def work(t):
        return render_focal_blur(
            seq.frames[t], depths.maps[t], fps[t], sched.f_r, sched.n_max, sched.sigma
        )

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, range(len(seq))))
    else:
        results = [work(t) for t in range(len(seq))]
    frames = FrameSequence(np.stack([r[0] for r in results]))
    maps = np.stack([r[1] for r in results])
    masks = np.stack([binarize(m, lowest=0.0) for m in maps])
    return frames, BlurMapSequence(maps), MaskSequence(masks)


# ---------------------------------------------------------------------------
# training-time sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleBounds:
    """Ranges for randomly drawn schedules (none are fixed by the method)."""

    f0: tuple[float, float] = (0.0, 255.0)
    f_r: tuple[float, float] = (0.0, 150.0)
    # maximum |df/dt| is this fraction of the full depth range per clip
    sweep: tuple[float, float] = (0.0, 1.0)
    n_max: tuple[int, ...] = N_MAX_CHOICES
    sigma: float = 5.0

    def __post_init__(self):
        for name in ("f0", "f_r", "sweep"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ScheduleError(f"{name} bounds are inverted: {lo} > {hi}")
        if self.f_r[0] < 0:
            raise ScheduleError("f_r lower bound must be >= 0")
        if not self.n_max or any(n % 2 == 0 or not 3 <= n <= 11 for n in self.n_max):
            raise ScheduleError(f"n_max choices must be odd in [3, 11], got {self.n_max}")
        if self.sigma <= 0:
            raise ScheduleError("sigma must be > 0")


def sample_schedule(
    rng: np.random.Generator, length: int, bounds: ScheduleBounds = ScheduleBounds(), ref_count: int = 0
) -> FocusSchedule:
    """Draw f0, f_r, df/dt and n_max uniformly.

    The focus moves toward whichever end of the depth range is farther from
    the initial focal point.
    """
    f0 = float(rng.uniform(*bounds.f0))
    f_r = float(rng.uniform(*bounds.f_r))
    sweep = float(rng.uniform(*bounds.sweep))
    n_max = int(rng.choice(np.asarray(bounds.n_max)))
    direction = 1.0 if (DEPTH_MAX - f0) >= (f0 - DEPTH_MIN) else -1.0
    df_dt = direction * sweep * (DEPTH_MAX - DEPTH_MIN) / length
    return FocusSchedule(
        f0=f0, f_r=f_r, df_dt=df_dt, n_max=n_max, sigma=bounds.sigma,
        length=length, ref_count=ref_count,
    )


@dataclass(frozen=True)
class TrainingSample:
    schedule: FocusSchedule
    clip: tuple[int, ...]
    refs: tuple[int, ...]
    flip: bool
    reverse: bool


def sample_training_schedule(
    rng: np.random.Generator,
    n_frames: int,
    length: int = 10,
    ref_count: int = 6,
    bounds: ScheduleBounds = ScheduleBounds(),
) -> TrainingSample:
    """Draw a random schedule, a contiguous clip and distinct reference frames.

    When fewer than ``ref_count`` frames lie outside the clip, all of them are
    used. Flip and reversal are each switched on with probability 0.5.
    """
    if n_frames <= length:
        raise ScheduleError(f"need more than {length} frames, got {n_frames}")
    start = int(rng.integers(0, n_frames - length + 1))
    clip = tuple(range(start, start + length))
    outside = np.array([i for i in range(n_frames) if not start <= i < start + length])
    r = min(ref_count, outside.size)
    refs = tuple(sorted(int(i) for i in rng.choice(outside, size=r, replace=False)))
    sched = sample_schedule(rng, length, bounds, ref_count=r)
    flip = bool(rng.random() < 0.5)
    reverse = bool(rng.random() < 0.5)
    return TrainingSample(sched, clip, refs, flip, reverse)


# ---------------------------------------------------------------------------
# benchmark construction
# ---------------------------------------------------------------------------

def davis_blur_schedule(depths: DepthSequence) -> FocusSchedule:
    """Near-to-far sweep: f0=0, f_r=100, n_max=7, df/dt = max(D) / T."""
    t = len(depths)
    d_max = float(depths.maps.max())
    return FocusSchedule(
        f0=0.0, f_r=100.0, df_dt=d_max / t, n_max=7, sigma=5.0, length=t, f_end=d_max
    )


def build_davis_blur(
    seq: FrameSequence,
    depths: DepthSequence,
    out_dir: Path | str | None = None,
    sequence_id: str = "sequence",
    lr_factor: int = 2,
    jobs: int = 1,
) -> SynthResult:
    """Deterministic benchmark recipe; writes the dataset when ``out_dir`` is given."""
    sched = davis_blur_schedule(depths)
    return synthesize_dataset(seq, depths, sched, out_dir, sequence_id, lr_factor, jobs)


def _crop_to_multiple(seq, factor):
    h, w = seq.hw
    hh, ww = h - h % factor, w - w % factor
    if (hh, ww) == (h, w):
        return seq
    data = media._data(seq)[:, :hh, :ww]
    return type(seq)(data)


def synthesize_dataset(
    seq: FrameSequence,
    depths: DepthSequence,
    sched: FocusSchedule,
    out_dir: Path | str | None = None,
    sequence_id: str = "sequence",
    lr_factor: int = 2,
    jobs: int = 1,
) -> SynthResult:
    frames, maps, masks = synthesize_sequence(seq, depths, sched, jobs=jobs)
    result = SynthResult(
        frames=frames,
        blur_maps=maps,
        masks=masks,
        schedule=sched,
        focal_points=focal_points(sched, len(seq)),
        lr_factor=lr_factor,
    )
    # LR variants need dimensions divisible by the factor; trailing rows/cols go.
    result.lr_frames = media.downsample(_crop_to_multiple(frames, lr_factor), lr_factor)
    result.lr_depth = media.downsample(_crop_to_multiple(depths, lr_factor), lr_factor)
    result.lr_blur_maps = media.downsample(_crop_to_multiple(maps, lr_factor), lr_factor)
    result.lr_masks = media.downsample(_crop_to_multiple(masks, lr_factor), lr_factor)
    if out_dir is not None:
        result.manifest = write_dataset(result, depths, out_dir, sequence_id)
    return result


def write_dataset(
    result: SynthResult, depths: DepthSequence, out_dir: Path | str, sequence_id: str
) -> DatasetManifest:
    out_dir = Path(out_dir)

    def rel(paths):
        return [p.relative_to(out_dir).as_posix() for p in paths]

    manifest = DatasetManifest(
        sequence_id=sequence_id,
        frames=rel(media.save_frames(result.frames, out_dir / "frames")),
        depth=rel(media.save_depth(depths, out_dir / "depth")),
        blur_maps=rel(media.save_blur_maps(result.blur_maps, out_dir / "blur_maps")),
        masks=rel(media.save_masks(result.masks, out_dir / "masks")),
        schedule=result.schedule.to_dict(),
        focal_points=list(result.focal_points),
        lr_factor=result.lr_factor,
        lr_frames=rel(media.save_frames(result.lr_frames, out_dir / "lr" / "frames")),
        lr_depth=rel(media.save_depth(result.lr_depth, out_dir / "lr" / "depth")),
        lr_blur_maps=rel(media.save_blur_maps(result.lr_blur_maps, out_dir / "lr" / "blur_maps")),
        lr_masks=rel(media.save_masks(result.lr_masks, out_dir / "lr" / "masks")),
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
