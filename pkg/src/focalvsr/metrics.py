"""Training losses and evaluation metrics (PSNR, SSIM, tOF)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .media import DimensionMismatchError, luma

PSNR_CAP = 99.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    epsilon: float = 0.001

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def charbonnier(pred, gt, epsilon: float = 0.001) -> float:
    pred, gt = _pair(pred, gt)
    # hypot avoids rounding in epsilon**2, and averaging the excess over
    # epsilon keeps identical inputs at exactly epsilon
    return float(epsilon + np.mean(np.hypot(pred - gt, epsilon) - epsilon))


def _expand_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape == shape:
        return mask
    if mask.shape == shape[:-1]:
        return np.broadcast_to(mask[..., None], shape)
    raise DimensionMismatchError(f"mask {mask.shape} does not fit images {shape}")


def masked_l1(pred, gt, mask) -> float:
    """Mean absolute error over pixels with mask == 1; 0 for an empty mask."""
    pred, gt = _pair(pred, gt)
    sel = _expand_mask(mask, pred.shape)
    if not sel.any():
        return 0.0
    return float(np.abs(pred - gt)[sel].mean())


def total_loss(pred_hr, gt_hr, pred_lr, gt_lr, mask, weights: LossWeights = LossWeights()) -> float:
    """Charbonnier on the HR pair plus L1 on blurred and on focused LR regions."""
    mask = np.asarray(mask)
    return (
        weights.alpha * charbonnier(pred_hr, gt_hr, weights.epsilon)
        + weights.beta * masked_l1(pred_lr, gt_lr, mask)
        + weights.gamma * masked_l1(pred_lr, gt_lr, 1 - mask)
    )


def psnr(pred, gt, peak: float = 1.0) -> float:
    pred, gt = _pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def masked_psnr(pred, gt, mask, peak: float = 1.0) -> float:
    pred, gt = _pair(pred, gt)
    sel = _expand_mask(mask, pred.shape)
    if not sel.any():
        return PSNR_CAP
    mse = float(np.mean((pred[sel] - gt[sel]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(pred, gt, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, crop: bool = True) -> np.ndarray:
    """Local SSIM of two 2-D images.

    Filtering reflects at the borders; with ``crop`` the ``win_size // 2``
    border, where windows leave the image, is dropped.
    """
    x, y = _pair(pred, gt)
    if x.ndim != 2:
        raise ValueError("ssim_map expects 2-D images")
    g = _gaussian_window(win_size, sigma)

    def filt(a):
        for axis in (0, 1):
            a = correlate1d(a, g, axis=axis, mode="reflect")
        return a

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    s = num / den
    pad = win_size // 2
    if crop and min(s.shape) > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return s


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM; colour images are averaged over channels."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        return float(ssim_map(pred, gt, data_range).mean())
    return float(np.mean([ssim_map(pred[..., c], gt[..., c], data_range).mean() for c in range(pred.shape[-1])]))


def masked_ssim(pred, gt, mask, data_range: float = 1.0) -> float:
    """SSIM map averaged over masked pixels (uncropped maps)."""
    pred, gt = _pair(pred, gt)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return 1.0
    chans = [pred] if pred.ndim == 2 else [pred[..., c] for c in range(pred.shape[-1])]
    refs = [gt] if gt.ndim == 2 else [gt[..., c] for c in range(gt.shape[-1])]
    vals = []
    for p, r in zip(chans, refs):
        vals.append(ssim_map(p, r, data_range, crop=False)[mask].mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# temporal consistency
# ---------------------------------------------------------------------------

def _shift_lookup(img: np.ndarray, oy: np.ndarray, ox: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy = np.clip(np.arange(h)[:, None] + oy, 0, h - 1)
    xx = np.clip(np.arange(w)[None, :] + ox, 0, w - 1)
    return img[yy, xx]


def block_matching_flow(
    a: np.ndarray,
    b: np.ndarray,
    block: int = 8,
    radius: int = 3,
    levels: int = 3,
    penalty: float = 1e-3,
) -> np.ndarray:
    """Integer motion field from grayscale ``a`` to ``b`` (H x W x 2, dx/dy).

    Coarse-to-fine block matching over a ``levels``-deep 2x pyramid. At each
    level every block searches ``+-radius`` around the upscaled coarse
    estimate, minimizing the mean absolute difference plus ``penalty`` times
    the L1 length of the displacement, which pins flat regions to zero
    motion. Ties go to the earliest candidate in a fixed scan order, so the
    result is deterministic.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 2 * block:
            break
        pyr_a.append(_half(pyr_a[-1]))
        pyr_b.append(_half(pyr_b[-1]))
    disp = None
    for la, lb in zip(reversed(pyr_a), reversed(pyr_b)):
        h, w = la.shape
        hb, wb = -(-h // block), -(-w // block)
        if disp is None:
            disp = np.zeros((hb, wb, 2), dtype=np.int64)
        else:
            disp = _upscale_disp(disp, hb, wb)
        ph, pw = hb * block - h, wb * block - w
        valid = np.pad(np.ones((h, w)), ((0, ph), (0, pw)))
        vsum = valid.reshape(hb, block, wb, block).sum(axis=(1, 3))
        best_cost = np.full((hb, wb), np.inf)
        best = disp.copy()
        base_x = np.repeat(np.repeat(disp[..., 0], block, 0), block, 1)[:h, :w]
        base_y = np.repeat(np.repeat(disp[..., 1], block, 0), block, 1)[:h, :w]
        offsets = sorted(
            ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
            key=lambda o: (abs(o[0]) + abs(o[1]), o[0], o[1]),
        )
        for dy, dx in offsets:
            cand = _shift_lookup(lb, base_y + dy, base_x + dx)
            diff = np.pad(np.abs(la - cand), ((0, ph), (0, pw)))
            cost = diff.reshape(hb, block, wb, block).sum(axis=(1, 3)) / vsum
            cx = disp[..., 0] + dx
            cy = disp[..., 1] + dy
            cost = cost + penalty * (np.abs(cx) + np.abs(cy))
            better = cost < best_cost - 1e-12
            best_cost = np.where(better, cost, best_cost)
            best[..., 0] = np.where(better, cx, best[..., 0])
            best[..., 1] = np.where(better, cy, best[..., 1])
        disp = best
    h, w = a.shape
    dense = np.repeat(np.repeat(disp, block, 0), block, 1)[:h, :w]
    return dense.astype(np.float64)


def _half(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _upscale_disp(disp: np.ndarray, hb: int, wb: int) -> np.ndarray:
    up = np.repeat(np.repeat(disp, 2, 0), 2, 1) * 2
    out = np.zeros((hb, wb, 2), dtype=np.int64)
    ch, cw = min(hb, up.shape[0]), min(wb, up.shape[1])
    out[:ch, :cw] = up[:ch, :cw]
    if ch < hb:
        out[ch:, :cw] = up[ch - 1 : ch, :cw]
    if cw < wb:
        out[:, cw:] = out[:, cw - 1 : cw]
    return out


def _gray(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return luma(frames) if frames.ndim == 4 else frames


def tof(pred_seq, gt_seq, **flow_kwargs) -> float:
    """Mean per-pixel L1 distance between the motion fields of two sequences."""
    pred, gt = _pair(_gray(pred_seq), _gray(gt_seq))
    if pred.shape[0] < 2:
        raise ValueError("tOF needs at least two frames")
    per_pair = tof_per_pair(pred, gt, **flow_kwargs)
    return float(np.mean(per_pair))


def tof_per_pair(pred, gt, **flow_kwargs) -> list[float]:
    pred, gt = _pair(_gray(pred), _gray(gt))
    out = []
    for t in range(pred.shape[0] - 1):
        fp = block_matching_flow(pred[t], pred[t + 1], **flow_kwargs)
        fg = block_matching_flow(gt[t], gt[t + 1], **flow_kwargs)
        out.append(float(np.abs(fp - fg).sum(axis=-1).mean()))
    return out


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    tof: list[float]
    masked_psnr: list[float] = field(default_factory=list)
    masked_ssim: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_tof(self) -> float:
        return float(np.mean(self.tof)) if self.tof else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = {
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
            "tof": self.mean_tof,
        }
        if self.masked_psnr:
            d["mean"]["masked_psnr"] = float(np.mean(self.masked_psnr))
            d["mean"]["masked_ssim"] = float(np.mean(self.masked_ssim))
        return d

    def table(self) -> str:
        rows = ["frame     PSNR    SSIM     tOF"]
        for t in range(len(self.psnr)):
            tof_v = f"{self.tof[t]:7.3f}" if t < len(self.tof) else "      -"
            rows.append(f"{t:5d} {self.psnr[t]:8.3f} {self.ssim[t]:7.4f} {tof_v}")
        rows.append(f"mean  {self.mean_psnr:8.3f} {self.mean_ssim:7.4f} {self.mean_tof:7.3f}")
        return "\n".join(rows)


def evaluate(pred_frames, gt_frames, masks=None) -> MetricReport:
    pred, gt = _pair(pred_frames, gt_frames)
    psnrs = [psnr(p, g) for p, g in zip(pred, gt)]
    ssims = [ssim(p, g) for p, g in zip(pred, gt)]
    tofs = tof_per_pair(pred, gt) if len(pred) >= 2 else []
    report = MetricReport(psnrs, ssims, tofs)
    if masks is not None:
        masks = np.asarray(masks)
        report.masked_psnr = [masked_psnr(p, g, m) for p, g, m in zip(pred, gt, masks)]
        report.masked_ssim = [masked_ssim(p, g, m) for p, g, m in zip(pred, gt, masks)]
    return report
