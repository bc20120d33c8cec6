"""In-memory sequence types, file I/O and the data augmentations.

Every sequence is stored as one stacked, read-only numpy array with the time
axis first. PNG files are read and written with Pillow; Middlebury ``.flo``
files are handled directly with ``struct``/numpy so the byte layout is
explicit (little-endian regardless of host).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TypeVar, Union

import cv2
import numpy as np
from PIL import Image

FLO_TAG = b"PIEH"
BLUR_MAP_SCALE = 20.0
MANIFEST_SCHEMA_VERSION = 1


class MediaError(ValueError):
    """Base class for malformed or inconsistent media inputs."""


class EmptyInputError(MediaError):
    pass


class DimensionMismatchError(MediaError):
    pass


class FlowFormatError(MediaError):
    pass


class FlowLengthError(MediaError):
    pass


def _frozen(arr: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _stack(items, ndim: int, name: str, dtype) -> np.ndarray:
    if isinstance(items, np.ndarray) and items.ndim == ndim:
        arr = items
    else:
        items = list(items)
        if not items:
            raise EmptyInputError(f"{name}: sequence is empty")
        shapes = {np.shape(x) for x in items}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"{name}: mixed dimensions {sorted(shapes)}")
        arr = np.stack(items)
    if arr.ndim != ndim:
        raise DimensionMismatchError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyInputError(f"{name}: sequence is empty")
    return _frozen(arr, dtype)


@dataclass(frozen=True)
class FrameSequence:
    """T x H x W x 3 float64 frames in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        arr = _stack(self.frames, 4, "FrameSequence", np.float64)
        if arr.shape[-1] != 3:
            raise DimensionMismatchError(f"FrameSequence: expected 3 channels, got {arr.shape[-1]}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise MediaError("FrameSequence: pixel values must lie in [0, 1]")
        object.__setattr__(self, "frames", arr)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class DepthSequence:
    """T x H x W relative depth in [0, 255]; larger is farther."""

    maps: np.ndarray

    def __post_init__(self):
        arr = _stack(self.maps, 3, "DepthSequence", np.float64)
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise MediaError("DepthSequence: values must lie in [0, 255]")
        object.__setattr__(self, "maps", arr)

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class BlurMapSequence:
    """T x H x W per-pixel blur amount (kernel size for synthesized maps)."""

    maps: np.ndarray

    def __post_init__(self):
        arr = _stack(self.maps, 3, "BlurMapSequence", np.float64)
        if arr.min() < 0.0:
            raise MediaError("BlurMapSequence: values must be non-negative")
        object.__setattr__(self, "maps", arr)

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class MaskSequence:
    """T x H x W uint8 masks, 1 marks a blurred pixel."""

    masks: np.ndarray

    def __post_init__(self):
        arr = _stack(self.masks, 3, "MaskSequence", None)
        if not np.isin(arr, (0, 1)).all():
            raise MediaError("MaskSequence: values must be 0 or 1")
        object.__setattr__(self, "masks", _frozen(arr, np.uint8))

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]


@dataclass(frozen=True)
class FlowSequence:
    """(T-1) x H x W x 2 displacement fields (dx, dy) in pixels.

    ``flows[t]`` maps pixels of frame t to frame t+1 for a forward sequence.
    """

    flows: np.ndarray

    def __post_init__(self):
        arr = _stack(self.flows, 4, "FlowSequence", np.float32)
        if arr.shape[-1] != 2:
            raise DimensionMismatchError(f"FlowSequence: expected 2 channels, got {arr.shape[-1]}")
        object.__setattr__(self, "flows", arr)

    def __len__(self) -> int:
        return self.flows.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.flows.shape[1], self.flows.shape[2]

    def check_pairs(self, n_frames: int) -> None:
        if len(self) != n_frames - 1:
            raise FlowLengthError(
                f"{n_frames} frames need {n_frames - 1} flows, got {len(self)}"
            )


AnySequence = Union[FrameSequence, DepthSequence, BlurMapSequence, MaskSequence, FlowSequence]
S = TypeVar("S", FrameSequence, DepthSequence, BlurMapSequence, MaskSequence, FlowSequence)


def _data(seq: AnySequence) -> np.ndarray:
    for name in ("frames", "maps", "masks", "flows"):
        if hasattr(seq, name):
            return getattr(seq, name)
    raise TypeError(f"not a sequence type: {type(seq).__name__}")


def _rebuild(seq: S, data: np.ndarray) -> S:
    return type(seq)(data)


def luma(frame: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an H x W x 3 frame (or T x H x W x 3 stack)."""
    return frame @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path | str, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def frame_name(index: int) -> str:
    return f"{index:05d}.png"


def _list_pngs(directory: Path | str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyInputError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise EmptyInputError(f"{directory}: no PNG files")
    return files


def _check_same_shape(arrays: Sequence[np.ndarray], files: Sequence[Path]) -> None:
    first = arrays[0].shape
    for arr, path in zip(arrays, files):
        if arr.shape != first:
            raise DimensionMismatchError(
                f"{path.name} has shape {arr.shape[:2]}, expected {first[:2]}"
            )


# ---------------------------------------------------------------------------
# PNG loaders / savers
# ---------------------------------------------------------------------------

def load_frames(directory: Path | str) -> FrameSequence:
    """Load lexicographically ordered 8-bit RGB PNGs; value p maps to p/255."""
    files = _list_pngs(directory)
    raw = []
    for path in files:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise MediaError(f"{path.name}: expected 8-bit RGB, got mode {im.mode}")
            raw.append(np.asarray(im, dtype=np.uint8))
    _check_same_shape(raw, files)
    return FrameSequence(np.stack(raw).astype(np.float64) / 255.0)


def save_frames(seq: FrameSequence, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    out = []
    quantized = np.rint(np.clip(seq.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    for t, frame in enumerate(quantized):
        path = directory / frame_name(t)
        atomic_write_bytes(path, _png_bytes(frame))
        out.append(path)
    return out


def load_depth(directory: Path | str) -> DepthSequence:
    """Load grayscale depth PNGs into [0, 255].

    16-bit values v map to v * 255 / 65535; 8-bit values are taken as-is.
    Any other mode is rejected.
    """
    files = _list_pngs(directory)
    maps = []
    for path in files:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16L", "I;16B"):
                arr = np.asarray(im).astype(np.float64) * (255.0 / 65535.0)
            elif im.mode == "I":
                raw = np.asarray(im)
                if raw.min() < 0 or raw.max() > 65535:
                    raise MediaError(f"{path.name}: depth values exceed 16 bits")
                arr = raw.astype(np.float64) * (255.0 / 65535.0)
            elif im.mode == "L":
                arr = np.asarray(im).astype(np.float64)
            else:
                raise MediaError(f"{path.name}: unsupported depth mode {im.mode}")
        maps.append(arr)
    _check_same_shape(maps, files)
    return DepthSequence(np.stack(maps))


def save_depth(seq: DepthSequence, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    out = []
    raw = np.rint(seq.maps * (65535.0 / 255.0)).astype(np.uint16)
    for t, arr in enumerate(raw):
        path = directory / frame_name(t)
        atomic_write_bytes(path, _png_bytes(arr))
        out.append(path)
    return out


def load_blur_maps(directory: Path | str, scale: float = BLUR_MAP_SCALE) -> BlurMapSequence:
    """Load 8-bit blur-map PNGs; stored value = blur * scale."""
    files = _list_pngs(directory)
    maps = []
    for path in files:
        with Image.open(path) as im:
            if im.mode != "L":
                raise MediaError(f"{path.name}: blur maps must be 8-bit grayscale")
            maps.append(np.asarray(im).astype(np.float64) / scale)
    _check_same_shape(maps, files)
    return BlurMapSequence(np.stack(maps))


def save_blur_maps(
    seq: BlurMapSequence, directory: Path | str, scale: float = BLUR_MAP_SCALE
) -> list[Path]:
    """Save blur maps as 8-bit PNG (value * scale).

    With the default scale 20 this is lossless for integer kernel sizes up to 12.
    Estimated maps in [0, 1] are written with ``scale=255``.
    """
    scaled = seq.maps * scale
    if scaled.max() > 255.0 + 1e-9:
        raise MediaError(f"blur map value {seq.maps.max()} does not fit 8 bits at scale {scale}")
    directory = Path(directory)
    out = []
    for t, arr in enumerate(np.rint(scaled).astype(np.uint8)):
        path = directory / frame_name(t)
        atomic_write_bytes(path, _png_bytes(arr))
        out.append(path)
    return out


def load_masks(directory: Path | str) -> MaskSequence:
    files = _list_pngs(directory)
    masks = []
    for path in files:
        with Image.open(path) as im:
            if im.mode not in ("L", "1"):
                raise MediaError(f"{path.name}: masks must be grayscale")
            masks.append((np.asarray(im) > 0).astype(np.uint8))
    _check_same_shape(masks, files)
    return MaskSequence(np.stack(masks))


def save_masks(seq: MaskSequence, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    out = []
    for t, arr in enumerate(seq.masks):
        path = directory / frame_name(t)
        atomic_write_bytes(path, _png_bytes((arr * 255).astype(np.uint8)))
        out.append(path)
    return out


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def encode_flo(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    return FLO_TAG + struct.pack("<ii", w, h) + flow.astype("<f4").tobytes(order="C")


def decode_flo(payload: bytes) -> np.ndarray:
    if len(payload) < 12:
        raise FlowLengthError(f"flow header truncated ({len(payload)} bytes)")
    if payload[:4] != FLO_TAG:
        raise FlowFormatError(f"bad flow tag {payload[:4]!r}")
    w, h = struct.unpack("<ii", payload[4:12])
    if w < 0 or h < 0:
        raise FlowFormatError(f"negative flow dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(payload) < expected:
        raise FlowLengthError(f"flow payload truncated: {len(payload)} < {expected} bytes")
    if len(payload) > expected:
        raise FlowLengthError(f"flow payload has {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).astype(np.float32)


def write_flo(path: Path | str, flow: np.ndarray) -> None:
    atomic_write_bytes(path, encode_flo(flow))


def read_flo(path: Path | str) -> np.ndarray:
    return decode_flo(Path(path).read_bytes())


def save_flows(seq: FlowSequence, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    out = []
    for t, flow in enumerate(seq.flows):
        path = directory / f"{t:05d}.flo"
        write_flo(path, flow)
        out.append(path)
    return out


def load_flows(directory: Path | str) -> FlowSequence:
    directory = Path(directory)
    files = sorted(directory.glob("*.flo")) if directory.is_dir() else []
    if not files:
        raise EmptyInputError(f"{directory}: no .flo files")
    flows = [read_flo(p) for p in files]
    _check_same_shape(flows, files)
    return FlowSequence(np.stack(flows))


# ---------------------------------------------------------------------------
# augmentations and resampling
# ---------------------------------------------------------------------------

def horizontal_flip(seq: S) -> S:
    """Mirror every frame left-right; flow x-components change sign."""
    data = _data(seq)[:, :, ::-1]
    if isinstance(seq, FlowSequence):
        data = data * np.array([-1.0, 1.0], dtype=np.float32)
    return _rebuild(seq, data)


def temporal_reverse(seq: S) -> S:
    """Reverse frame order.

    A reversed forward FlowSequence is returned negated, which is the exact
    backward flow for translational motion and an approximation otherwise.
    """
    data = _data(seq)[::-1]
    if isinstance(seq, FlowSequence):
        data = -data
    return _rebuild(seq, data)


def _resize_stack(data: np.ndarray, factor: int, interpolation: int) -> np.ndarray:
    t, h, w = data.shape[:3]
    size = (w // factor, h // factor)
    out = [cv2.resize(np.ascontiguousarray(x), size, interpolation=interpolation) for x in data]
    out = np.stack(out)
    if data.ndim == 4 and out.ndim == 3:
        out = out[..., None]
    return out


def downsample(seq: S, factor: int) -> S:
    """Integer-factor downsampling.

    Frames and depth use bicubic resampling (clipped back into their value
    range). Blur maps and masks take the top-left sample of every block so no
    new kernel sizes or mask values can appear. Flow vectors are
    bicubic-resampled and divided by ``factor``.
    """
    if factor < 1:
        raise MediaError(f"factor must be >= 1, got {factor}")
    h, w = seq.hw
    if h % factor or w % factor:
        raise DimensionMismatchError(f"factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return seq
    data = _data(seq)
    if isinstance(seq, (BlurMapSequence, MaskSequence)):
        return _rebuild(seq, data[:, ::factor, ::factor])
    out = _resize_stack(data, factor, cv2.INTER_CUBIC)
    if isinstance(seq, FrameSequence):
        out = np.clip(out, 0.0, 1.0)
    elif isinstance(seq, DepthSequence):
        out = np.clip(out, 0.0, 255.0)
    elif isinstance(seq, FlowSequence):
        out = out / factor
    return _rebuild(seq, out)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """JSON description of one synthesized sequence on disk.

    Paths are stored relative to the manifest's directory.
    """

    sequence_id: str
    frames: list[str]
    depth: list[str]
    blur_maps: list[str]
    masks: list[str]
    schedule: dict
    focal_points: list[float] = field(default_factory=list)
    lr_factor: int = 2
    lr_frames: list[str] = field(default_factory=list)
    lr_depth: list[str] = field(default_factory=list)
    lr_blur_maps: list[str] = field(default_factory=list)
    lr_masks: list[str] = field(default_factory=list)
    blur_map_scale: float = BLUR_MAP_SCALE
    root: Path | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "sequence_id": self.sequence_id,
            "schedule": self.schedule,
            "focal_points": self.focal_points,
            "blur_map_scale": self.blur_map_scale,
            "hr": {
                "frames": self.frames,
                "depth": self.depth,
                "blur_maps": self.blur_maps,
                "masks": self.masks,
            },
            "lr": {
                "factor": self.lr_factor,
                "frames": self.lr_frames,
                "depth": self.lr_depth,
                "blur_maps": self.lr_blur_maps,
                "masks": self.lr_masks,
            },
        }

    @classmethod
    def from_dict(cls, data: dict, root: Path | None = None) -> "DatasetManifest":
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise MediaError(f"unsupported manifest schema_version {version!r}")
        hr, lr = data["hr"], data["lr"]
        return cls(
            sequence_id=data["sequence_id"],
            frames=list(hr["frames"]),
            depth=list(hr["depth"]),
            blur_maps=list(hr["blur_maps"]),
            masks=list(hr["masks"]),
            schedule=dict(data["schedule"]),
            focal_points=[float(x) for x in data["focal_points"]],
            lr_factor=int(lr["factor"]),
            lr_frames=list(lr["frames"]),
            lr_depth=list(lr["depth"]),
            lr_blur_maps=list(lr["blur_maps"]),
            lr_masks=list(lr["masks"]),
            blur_map_scale=float(data["blur_map_scale"]),
            root=root,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Path | str) -> None:
        atomic_write_bytes(path, self.to_json().encode())

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        manifest = cls.from_dict(json.loads(path.read_text()), root=path.parent)
        manifest.validate()
        return manifest

    def all_paths(self) -> list[str]:
        return (
            self.frames + self.depth + self.blur_maps + self.masks
            + self.lr_frames + self.lr_depth + self.lr_blur_maps + self.lr_masks
        )

    def validate(self) -> None:
        root = self.root or Path(".")
        missing = [p for p in self.all_paths() if not (root / p).exists()]
        if missing:
            raise MediaError(f"manifest references {len(missing)} missing files, e.g. {missing[0]}")

    def resolve(self, group: str) -> Path:
        """Directory holding one artifact group, e.g. ``"lr_frames"``."""
        paths = getattr(self, group)
        if not paths:
            raise MediaError(f"manifest has no {group}")
        return (self.root or Path(".")) / Path(paths[0]).parent
