"""Forward pass of the map-guided sparse window transformer.

Everything here is inference-only numpy. Weights come from a seeded normal
initializer or a safetensors file; the encoder/decoder are fixed bicubic
resampling plus per-pixel linear maps, standing in for learned convolutions.

Array layout is time-first and channels-last throughout: features are
``T x H x W x C`` and tokens ``T x m x n x D``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .media import DimensionMismatchError


@dataclass(frozen=True)
class PatchGeometry:
    kernel: int = 7
    stride: int = 3
    padding: int = 3

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        m = (h + 2 * self.padding - self.kernel) // self.stride + 1
        n = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if m < 1 or n < 1:
            raise DimensionMismatchError(f"{h}x{w} features too small for kernel {self.kernel}")
        return m, n


@dataclass(frozen=True)
class PatchGrid:
    """Overlapping patches; ``tokens[t, i, j]`` is a flattened k x k x C patch."""

    tokens: np.ndarray
    feature_shape: tuple[int, int, int]
    geometry: PatchGeometry = PatchGeometry()

    @property
    def grid(self) -> tuple[int, int]:
        return self.tokens.shape[1], self.tokens.shape[2]


def _patches(features: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    # -> T x m x n x k x k x C, edge-padded so a constant map gives constant tokens
    k, s, p = geometry.kernel, geometry.stride, geometry.padding
    t, h, w, c = features.shape
    m, n = geometry.grid_shape(h, w)
    padded = np.pad(features, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")
    out = np.empty((t, m, n, k, k, c), dtype=padded.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, :, di, dj, :] = padded[:, di : di + s * (m - 1) + 1 : s, dj : dj + s * (n - 1) + 1 : s, :]
    return out


def soft_split(features: np.ndarray, geometry: PatchGeometry = PatchGeometry()) -> PatchGrid:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4:
        raise DimensionMismatchError(f"expected T x H x W x C features, got {features.shape}")
    patches = _patches(features, geometry)
    t, m, n = patches.shape[:3]
    return PatchGrid(patches.reshape(t, m, n, -1), features.shape[1:], geometry)


def soft_comp(grid: PatchGrid) -> np.ndarray:
    """Fold patches back, dividing every pixel by the number of patches covering it."""
    g = grid.geometry
    k, s, p = g.kernel, g.stride, g.padding
    h, w, c = grid.feature_shape
    t, m, n = grid.tokens.shape[:3]
    patches = grid.tokens.reshape(t, m, n, k, k, c)
    canvas = np.zeros((t, h + 2 * p, w + 2 * p, c))
    count = np.zeros((h + 2 * p, w + 2 * p))
    for di in range(k):
        for dj in range(k):
            rs = slice(di, di + s * (m - 1) + 1, s)
            cs = slice(dj, dj + s * (n - 1) + 1, s)
            canvas[:, rs, cs, :] += patches[:, :, :, di, dj, :]
            count[rs, cs] += 1
    canvas = canvas[:, p : p + h, p : p + w]
    count = count[p : p + h, p : p + w]
    return canvas / count[None, :, :, None]


def build_query_mask(
    blur_maps: np.ndarray,
    feature_hw: tuple[int, int],
    geometry: PatchGeometry = PatchGeometry(),
) -> np.ndarray:
    """Per-token maximum blur over the token footprint and over all frames.

    ``blur_maps`` (T x H x W) are first max-pooled onto the feature grid
    ``feature_hw`` (H and W must be integer multiples of it), then pooled over
    each token's patch. The result is 0 exactly where every frame is in focus
    throughout the footprint.
    """
    blur_maps = np.asarray(blur_maps, dtype=np.float64)
    t, h, w = blur_maps.shape
    fh, fw = feature_hw
    if h % fh or w % fw:
        raise DimensionMismatchError(f"blur maps {h}x{w} do not tile features {fh}x{fw}")
    ry, rx = h // fh, w // fw
    pooled = blur_maps.reshape(t, fh, ry, fw, rx).max(axis=(2, 4))
    patches = _patches(pooled[..., None], geometry)
    return patches.max(axis=(3, 4, 5)).max(axis=0)


@dataclass(frozen=True)
class Window:
    rows: slice
    cols: slice
    kv_rows: slice
    kv_cols: slice


def partition_windows(
    grid_hw: tuple[int, int],
    window: tuple[int, int] = (5, 9),
    expand: tuple[int, int] | None = None,
) -> list[Window]:
    """Non-overlapping query windows with key/value windows grown by ``expand``.

    Border windows are truncated rather than padded; expanded windows are
    clamped to the grid. ``expand`` defaults to half the window (floored).
    """
    m, n = grid_hw
    wh, ww = window
    eh, ew = expand if expand is not None else (wh // 2, ww // 2)
    out = []
    for r0 in range(0, m, wh):
        for c0 in range(0, n, ww):
            r1, c1 = min(r0 + wh, m), min(c0 + ww, n)
            out.append(
                Window(
                    slice(r0, r1),
                    slice(c0, c1),
                    slice(max(r0 - eh, 0), min(r1 + eh, m)),
                    slice(max(c0 - ew, 0), min(c1 + ew, n)),
                )
            )
    return out


def select_kv_frames(n_frames: int, block_index: int, stride: int = 2) -> list[int]:
    """Key/value frames for one block: every ``stride``-th frame, offset by block.

    Offsets alternate with the block index and indices wrap around the clip,
    so each block sees exactly ceil(T / stride) frames and consecutive blocks
    together cover all of them.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if block_index < 0:
        raise ValueError(f"block_index must be >= 0, got {block_index}")
    offset = block_index % stride
    count = -(-n_frames // stride)
    return sorted({(offset + stride * k) % n_frames for k in range(count)})


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MGSTConfig:
    embed_dim: int = 128
    heads: int = 4
    blocks: int = 8
    window: tuple[int, int] = (5, 9)
    expand: tuple[int, int] | None = None
    kv_stride: int = 2
    patch: PatchGeometry = PatchGeometry()
    encoder_stride: int = 4
    in_channels: int = 6
    feature_channels: int = 16
    decoder_channels: int = 16
    ffn_mult: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.blocks < 1 or self.kv_stride < 1:
            raise ValueError("blocks and kv_stride must be >= 1")
        if self.encoder_stride not in (1, 2, 4, 8):
            raise ValueError("encoder_stride must be a power of two up to 8")
        if min(self.window) < 1:
            raise ValueError("window dimensions must be >= 1")


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mq: np.ndarray  # query-mask embedding, added as mask * mq


BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "mq")


@dataclass
class MGSTWeights:
    encoder: np.ndarray
    patch_in: np.ndarray
    patch_out: np.ndarray
    blocks: list[BlockWeights]
    decoder: list[np.ndarray]
    upsampler: np.ndarray

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "encoder": self.encoder,
            "patch_in": self.patch_in,
            "patch_out": self.patch_out,
            "upsampler": self.upsampler,
        }
        for i, d in enumerate(self.decoder):
            out[f"decoder.{i}"] = d
        for i, b in enumerate(self.blocks):
            for name in BLOCK_FIELDS:
                out[f"blocks.{i}.{name}"] = getattr(b, name)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "MGSTWeights":
        n_blocks = len({k.split(".")[1] for k in tensors if k.startswith("blocks.")})
        n_dec = len([k for k in tensors if k.startswith("decoder.")])
        blocks = [
            BlockWeights(**{name: np.asarray(tensors[f"blocks.{i}.{name}"], dtype=np.float64) for name in BLOCK_FIELDS})
            for i in range(n_blocks)
        ]
        return cls(
            encoder=np.asarray(tensors["encoder"], dtype=np.float64),
            patch_in=np.asarray(tensors["patch_in"], dtype=np.float64),
            patch_out=np.asarray(tensors["patch_out"], dtype=np.float64),
            blocks=blocks,
            decoder=[np.asarray(tensors[f"decoder.{i}"], dtype=np.float64) for i in range(n_dec)],
            upsampler=np.asarray(tensors["upsampler"], dtype=np.float64),
        )

    def check(self, cfg: MGSTConfig) -> None:
        d = cfg.embed_dim
        patch_dim = cfg.patch.kernel ** 2 * cfg.feature_channels
        expected = {
            "encoder": (cfg.in_channels, cfg.feature_channels),
            "patch_in": (patch_dim, d),
            "patch_out": (d, patch_dim),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(self.blocks) != cfg.blocks:
            raise ValueError(f"weights hold {len(self.blocks)} blocks, config needs {cfg.blocks}")
        for i, b in enumerate(self.blocks):
            for name in ("wq", "wk", "wv", "wo"):
                if getattr(b, name).shape != (d, d):
                    raise ValueError(f"block {i} {name} has shape {getattr(b, name).shape}")
            if b.mq.shape != (d,):
                raise ValueError(f"block {i} mq has shape {b.mq.shape}")


def init_weights(cfg: MGSTConfig, seed: int = 0) -> MGSTWeights:
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    d = cfg.embed_dim
    hidden = d * cfg.ffn_mult
    patch_dim = cfg.patch.kernel ** 2 * cfg.feature_channels

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    encoder = normal(cfg.in_channels, cfg.feature_channels)
    patch_in = normal(patch_dim, d)
    patch_out = normal(d, patch_dim)
    blocks = [
        BlockWeights(
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
            w1=normal(d, hidden), b1=np.zeros(hidden),
            w2=normal(hidden, d), b2=np.zeros(d),
            mq=normal(d),
        )
        for _ in range(cfg.blocks)
    ]
    n_dec = int(math.log2(cfg.encoder_stride))
    decoder = []
    c_in = cfg.feature_channels
    for _ in range(n_dec):
        decoder.append(normal(c_in, cfg.decoder_channels * 4))
        c_in = cfg.decoder_channels
    upsampler = normal(c_in, 3 * 4)
    return MGSTWeights(encoder, patch_in, patch_out, blocks, decoder, upsampler)


def save_weights(weights: MGSTWeights, path: Path | str) -> None:
    """Write a safetensors file: u64 header length, JSON header, raw LE data."""
    from safetensors.numpy import save

    from .media import atomic_write_bytes

    tensors = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in weights.to_tensors().items()}
    atomic_write_bytes(path, save(tensors))


def load_weights(path: Path | str) -> MGSTWeights:
    from safetensors.numpy import load

    return MGSTWeights.from_tensors(load(Path(path).read_bytes()))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionStats:
    kv_frames: list[int]
    active_windows: list[int] = field(default_factory=list)
    skipped_windows: list[int] = field(default_factory=list)
    max_row_sum_error: float = 0.0
    kv_tokens: int = 0


def attention_forward(
    tokens: np.ndarray,
    windows: list[Window],
    query_mask: np.ndarray,
    weights: BlockWeights,
    block_index: int,
    heads: int = 4,
    kv_stride: int = 2,
) -> tuple[np.ndarray, AttentionStats]:
    """One sparse transformer block.

    Windows whose query-mask values are all zero are skipped entirely (their
    tokens are returned untouched). Active windows attend from every frame's
    query tokens to the stride-selected frames' expanded-window tokens plus
    one mean-pooled global token per selected frame, then apply the
    feed-forward layer; both sub-layers are residual.
    """
    t, m, n, d = tokens.shape
    if query_mask.shape != (m, n):
        raise DimensionMismatchError(f"query mask {query_mask.shape} does not match grid {(m, n)}")
    dh = d // heads
    kv_idx = select_kv_frames(t, block_index, kv_stride)
    stats = AttentionStats(kv_frames=kv_idx)

    out = tokens.copy()
    normed = layer_norm(tokens)
    q_in = normed + query_mask[None, :, :, None] * weights.mq
    kv_src = normed[kv_idx]
    global_tokens = kv_src.mean(axis=(1, 2))

    for w_id, win in enumerate(windows):
        if not np.any(query_mask[win.rows, win.cols] > 0):
            stats.skipped_windows.append(w_id)
            continue
        stats.active_windows.append(w_id)
        q_tok = q_in[:, win.rows, win.cols]
        shape = q_tok.shape
        q = q_tok.reshape(-1, d) @ weights.wq
        kv = np.concatenate([kv_src[:, win.kv_rows, win.kv_cols].reshape(-1, d), global_tokens])
        k = kv @ weights.wk
        v = kv @ weights.wv
        stats.kv_tokens = max(stats.kv_tokens, kv.shape[0])

        qh = q.reshape(-1, heads, dh).transpose(1, 0, 2)
        kh = k.reshape(-1, heads, dh).transpose(1, 0, 2)
        vh = v.reshape(-1, heads, dh).transpose(1, 0, 2)
        attn = softmax(qh @ kh.transpose(0, 2, 1) / math.sqrt(dh))
        stats.max_row_sum_error = max(stats.max_row_sum_error, float(np.abs(attn.sum(-1) - 1.0).max()))
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(-1, d) @ weights.wo

        y = tokens[:, win.rows, win.cols].reshape(-1, d) + ctx
        y = y + gelu(layer_norm(y) @ weights.w1 + weights.b1) @ weights.w2 + weights.b2
        out[:, win.rows, win.cols] = y.reshape(shape)
    return out, stats


def block_stack_forward(
    tokens: np.ndarray,
    query_mask: np.ndarray,
    weights: MGSTWeights,
    cfg: MGSTConfig = MGSTConfig(),
) -> tuple[np.ndarray, list[AttentionStats]]:
    windows = partition_windows(tokens.shape[1:3], cfg.window, cfg.expand)
    stats = []
    x = tokens
    for b in range(cfg.blocks):
        x, s = attention_forward(x, windows, query_mask, weights.blocks[b], b, cfg.heads, cfg.kv_stride)
        stats.append(s)
    return x, stats


def pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """``... x H x W x (C*s*s) -> ... x H*s x W*s x C``.

    ``out[y*s+dy, x*s+dx, c] = in[y, x, c*s*s + dy*s + dx]``.
    """
    if s < 1:
        raise ValueError("scale must be >= 1")
    *lead, h, w, cs = x.shape
    if cs % (s * s):
        raise ValueError(f"{cs} channels not divisible by {s * s}")
    c = cs // (s * s)
    y = x.reshape(*lead, h, w, c, s, s)
    nl = len(lead)
    axes = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
    return y.transpose(axes).reshape(*lead, h * s, w * s, c)


def pixel_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    if s < 1:
        raise ValueError("scale must be >= 1")
    *lead, hs, ws, c = x.shape
    if hs % s or ws % s:
        raise ValueError(f"{hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    y = x.reshape(*lead, h, s, w, s, c)
    nl = len(lead)
    axes = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    return y.transpose(axes).reshape(*lead, h, w, c * s * s)


def _resize(x: np.ndarray, size_hw: tuple[int, int]) -> np.ndarray:
    h, w = size_hw
    out = np.stack([cv2.resize(np.ascontiguousarray(f), (w, h), interpolation=cv2.INTER_CUBIC) for f in x])
    return out.reshape(x.shape[0], h, w, -1)


@dataclass
class ForwardResult:
    frames: np.ndarray
    query_mask: np.ndarray
    block_stats: list[AttentionStats]
    grid: tuple[int, int]
    n_windows: int

    @property
    def skipped_windows(self) -> int:
        return sum(len(s.skipped_windows) for s in self.block_stats)


def model_forward(
    frames: np.ndarray,
    masks: np.ndarray,
    depth: np.ndarray,
    blur_maps: np.ndarray,
    weights: MGSTWeights,
    cfg: MGSTConfig = MGSTConfig(),
) -> ForwardResult:
    """LR clip (T x H x W x 3) -> 2x clip (T x 2H x 2W x 3).

    Inputs are stacked as RGB, mask, depth/255 and blur map channels,
    downsampled by ``encoder_stride``, projected, soft-split into tokens,
    run through the block stack, folded back and decoded with cascaded
    pixel-shuffle layers. The decoded signal is added to a bicubic 2x
    upsampling of the input frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    t, h, w, _ = frames.shape
    for name, arr in (("masks", masks), ("depth", depth), ("blur_maps", blur_maps)):
        if np.shape(arr) != (t, h, w):
            raise DimensionMismatchError(f"{name} shape {np.shape(arr)} != {(t, h, w)}")
    weights.check(cfg)
    s = cfg.encoder_stride
    ph, pw = (-h) % s, (-w) % s
    stacked = np.concatenate(
        [frames, np.asarray(masks, np.float64)[..., None], np.asarray(depth, np.float64)[..., None] / 255.0,
         np.asarray(blur_maps, np.float64)[..., None]],
        axis=-1,
    )
    pad = ((0, 0), (0, ph), (0, pw), (0, 0))
    stacked = np.pad(stacked, pad, mode="edge")
    blur_padded = np.pad(np.asarray(blur_maps, np.float64), pad[:3], mode="edge")
    hp, wp = h + ph, w + pw
    fh, fw = hp // s, wp // s

    encoded = _resize(stacked, (fh, fw)) @ weights.encoder
    grid = soft_split(encoded, cfg.patch)
    tokens = grid.tokens @ weights.patch_in
    qmask = build_query_mask(blur_padded, (fh, fw), cfg.patch)
    tokens, stats = block_stack_forward(tokens, qmask, weights, cfg)
    feats = soft_comp(PatchGrid(tokens @ weights.patch_out, grid.feature_shape, cfg.patch)) + encoded

    x = feats
    for layer in weights.decoder:
        x = pixel_shuffle(x @ layer, 2)
    x = pixel_shuffle(x @ weights.upsampler, 2)[:, : 2 * h, : 2 * w]
    base = _resize(frames, (2 * h, 2 * w))
    out = np.clip(base + x, 0.0, 1.0)
    n_windows = len(partition_windows(qmask.shape, cfg.window, cfg.expand))
    return ForwardResult(out, qmask, stats, qmask.shape, n_windows)
