"""Blur-map estimation from wavelet detail energy, and mask binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .media import DimensionMismatchError, luma

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class WaveletPyramid:
    """Orthonormal Haar decomposition.

    ``details[k]`` holds the (LH, HL, HH) bands of level k+1, ``shapes[k]`` the
    shape of the image that level was computed from (needed to undo the
    edge padding of odd dimensions). LH responds to vertical edges (high-pass
    across columns), HL to horizontal edges.
    """

    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    approx: np.ndarray
    shapes: list[tuple[int, int]]

    @property
    def levels(self) -> int:
        return len(self.details)


def _haar_step(x: np.ndarray):
    h, w = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, h % 2), (0, w % 2)), mode="edge")
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh)


def _haar_inverse(ll, bands, shape):
    lh, hl, hh = bands
    h2, w2 = ll.shape
    x = np.empty((2 * h2, 2 * w2), dtype=np.float64)
    x[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    x[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    x[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    x[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return x[: shape[0], : shape[1]]


def wavelet_decompose(image: np.ndarray, levels: int = 3) -> WaveletPyramid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if min(image.shape) < 2 ** levels:
        raise ValueError(f"{levels} levels need both dimensions >= {2 ** levels}, got {image.shape}")
    details, shapes = [], []
    ll = image
    for _ in range(levels):
        shapes.append(ll.shape)
        ll, bands = _haar_step(ll)
        details.append(bands)
    return WaveletPyramid(details, ll, shapes)


def wavelet_reconstruct(pyr: WaveletPyramid) -> np.ndarray:
    ll = pyr.approx
    for bands, shape in zip(reversed(pyr.details), reversed(pyr.shapes)):
        ll = _haar_inverse(ll, bands, shape)
    return ll


def sharpness_map(gray: np.ndarray, levels: int = 3) -> np.ndarray:
    """Sum of absolute detail coefficients, each band upsampled to full size."""
    pyr = wavelet_decompose(gray, levels)
    h, w = gray.shape
    total = np.zeros((h, w))
    for level, bands in enumerate(pyr.details, start=1):
        rep = 2 ** level
        energy = sum(np.abs(b) for b in bands)
        up = np.repeat(np.repeat(energy, rep, axis=0), rep, axis=1)
        total += up[:h, :w]
    return total


def depth_bin_index(depth_map: np.ndarray, depth_bins: int) -> np.ndarray:
    idx = np.floor(np.asarray(depth_map) / 255.0 * depth_bins).astype(np.int64)
    return np.clip(idx, 0, depth_bins - 1)


def estimate_blur_map(
    frame: np.ndarray,
    depth_map: np.ndarray,
    levels: int = 3,
    depth_bins: int = 32,
) -> np.ndarray:
    """Per-pixel blurriness in [0, 1] from per-depth wavelet sharpness.

    Sharpness is averaged within equal-width depth bins; a pixel's blurriness
    is ``1 - s_bin / max(s)``, so the sharpest depth bin reads 0. Frames with no
    high-frequency content at all report 0 everywhere.
    """
    frame = np.asarray(frame, dtype=np.float64)
    gray = luma(frame) if frame.ndim == 3 else frame
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if gray.shape != depth_map.shape:
        raise DimensionMismatchError(f"frame {gray.shape} and depth {depth_map.shape} differ")
    if depth_bins < 1:
        raise ValueError("depth_bins must be >= 1")
    sharp = sharpness_map(gray, levels)
    bins = depth_bin_index(depth_map, depth_bins)
    counts = np.bincount(bins.ravel(), minlength=depth_bins)
    sums = np.bincount(bins.ravel(), weights=sharp.ravel(), minlength=depth_bins)
    per_bin = np.full(depth_bins, sharp.mean())
    filled = counts > 0
    per_bin[filled] = sums[filled] / counts[filled]
    top = per_bin.max()
    if top <= 0:
        return np.zeros_like(sharp)
    blurriness = (top - per_bin) / top
    return blurriness[bins]


def binarize(blur_map: np.ndarray, tol: float = 0.0, lowest: float | None = None) -> np.ndarray:
    """Mask with 0 where the map equals its lowest value (within ``tol``), else 1.

    ``lowest`` defaults to the map minimum. Synthesized kernel-size maps pass
    ``lowest=0`` so a frame blurred everywhere is masked everywhere.
    """
    blur_map = np.asarray(blur_map, dtype=np.float64)
    if blur_map.size == 0:
        return np.zeros(blur_map.shape, dtype=np.uint8)
    ref = blur_map.min() if lowest is None else min(lowest, blur_map.min())
    return (blur_map > ref + tol).astype(np.uint8)
