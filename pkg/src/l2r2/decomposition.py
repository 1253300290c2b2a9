"""Foreground/background views of an image from detection and mask records.

Masks travel as run-length strings ``H;W;start:len,start:len,...`` whose
starts index the on-pixels in row-major order.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_data import ValidationError, format_float

__all__ = [
    "ViewKind",
    "DetectionRecord",
    "CropPadSpec",
    "PixelBuffer",
    "DEFAULT_PAD",
    "DEFAULT_TAU",
    "encode_rle",
    "decode_rle",
    "bbox_to_pixels",
    "square_pad_crop_spec",
    "crop_and_pad",
    "apply_view",
    "fallback_gate",
    "load_detections",
    "save_detections",
    "load_image",
    "save_image",
]

DEFAULT_PAD = 114
DEFAULT_TAU = 0.3
_EPS = 1e-9  # absorbs float noise such as 0.3 * 100 = 30.000000000000004


class ViewKind(str, enum.Enum):
    FULL = "full"
    FG_C = "fg_c"
    FG_M = "fg_m"
    BG_S = "bg_s"
    BG_B = "bg_b"


@dataclass(frozen=True)
class DetectionRecord:
    sample_id: str
    prompt: str
    score: float
    bbox: tuple[float, float, float, float]
    mask_rle: str | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValidationError(f"detection {self.sample_id!r}: bbox {self.bbox} not ordered within [0,1]")
        if not 0.0 <= float(self.score) <= 1.0:
            raise ValidationError(f"detection {self.sample_id!r}: score {self.score} outside [0,1]")
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))
        object.__setattr__(self, "score", float(self.score))

    def mask(self) -> np.ndarray | None:
        return None if not self.mask_rle else decode_rle(self.mask_rle)


@dataclass(frozen=True)
class CropPadSpec:
    """Pixel crop ``[x0, x1) x [y0, y1)`` followed by constant padding to a square."""

    x0: int
    y0: int
    x1: int
    y1: int
    left: int
    right: int
    top: int
    bottom: int
    pad_value: int = DEFAULT_PAD

    @property
    def side(self) -> int:
        return self.x1 - self.x0 + self.left + self.right


@dataclass(frozen=True)
class PixelBuffer:
    """Row-major, channel-interleaved 8-bit image held as an ``(H, W, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3:
            raise ValidationError(f"pixel buffer must be HxWxC, got shape {a.shape}")
        a = np.array(a, dtype=np.uint8, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other) -> bool:
        return isinstance(other, PixelBuffer) and np.array_equal(self.data, other.data)

    __hash__ = None


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def encode_rle(mask: np.ndarray) -> str:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValidationError("mask must be 2-D")
    flat = np.concatenate([[False], m.reshape(-1), [False]])
    edges = np.flatnonzero(flat[1:] != flat[:-1])
    starts, ends = edges[0::2], edges[1::2]
    runs = ",".join(f"{s}:{e - s}" for s, e in zip(starts, ends))
    return f"{m.shape[0]};{m.shape[1]};{runs}"


def decode_rle(text: str) -> np.ndarray:
    try:
        h_s, w_s, runs = text.split(";", 2)
        H, W = int(h_s), int(w_s)
    except ValueError:
        raise ValidationError(f"malformed mask RLE {text[:40]!r}") from None
    flat = np.zeros(H * W, dtype=bool)
    if runs:
        for item in runs.split(","):
            s, n = item.split(":")
            s, n = int(s), int(n)
            if s < 0 or n < 0 or s + n > H * W:
                raise ValidationError(f"mask run {item} outside {H}x{W}")
            flat[s : s + n] = True
    return flat.reshape(H, W)


# ---------------------------------------------------------------------------
# Geometry and views
# ---------------------------------------------------------------------------


def bbox_to_pixels(bbox, width: int, height: int) -> tuple[int, int, int, int]:
    """Floor the mins and ceil the maxes so the box never loses foreground pixels."""
    x0, y0, x1, y1 = bbox
    px0 = max(0, math.floor(x0 * width + _EPS))
    py0 = max(0, math.floor(y0 * height + _EPS))
    px1 = min(width, math.ceil(x1 * width - _EPS))
    py1 = min(height, math.ceil(y1 * height - _EPS))
    return px0, py0, px1, py1


def square_pad_crop_spec(bbox, image_size: tuple[int, int], pad_value: int = DEFAULT_PAD) -> CropPadSpec:
    """Crop rectangle for ``bbox`` plus the padding that makes it square.

    The shorter side is padded symmetrically; an odd deficit puts the extra
    pixel on the right/bottom. ``image_size`` is ``(W, H)``.
    """
    W, H = image_size
    if W < 1 or H < 1:
        raise ValidationError(f"image size must be positive, got {image_size}")
    x0, y0, x1, y1 = bbox_to_pixels(bbox, W, H)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValidationError(f"bbox {tuple(bbox)} has zero area at {W}x{H}")
    side = max(w, h)
    dx, dy = side - w, side - h
    return CropPadSpec(x0, y0, x1, y1, dx // 2, dx - dx // 2, dy // 2, dy - dy // 2, pad_value)


def crop_and_pad(image: PixelBuffer, spec: CropPadSpec) -> PixelBuffer:
    crop = image.data[spec.y0 : spec.y1, spec.x0 : spec.x1]
    out = np.pad(
        crop,
        ((spec.top, spec.bottom), (spec.left, spec.right), (0, 0)),
        mode="constant",
        constant_values=spec.pad_value,
    )
    return PixelBuffer(out)


def apply_view(
    kind: ViewKind | str,
    image: PixelBuffer,
    det: DetectionRecord | None = None,
    pad_value: int = DEFAULT_PAD,
) -> PixelBuffer:
    kind = ViewKind(kind)
    if kind is ViewKind.FULL:
        return PixelBuffer(image.data)
    if det is None:
        raise ValidationError(f"view {kind.value} needs a detection for this image")
    size = (image.width, image.height)
    mask = None
    if kind in (ViewKind.FG_M, ViewKind.BG_S):
        mask = det.mask()
        if mask is None:
            raise ValidationError(f"view {kind.value} needs a mask for {det.sample_id!r}")
        if mask.shape != (image.height, image.width):
            raise ValidationError(
                f"mask {mask.shape[1]}x{mask.shape[0]} does not match image {image.width}x{image.height}"
            )
    if kind is ViewKind.FG_C:
        return crop_and_pad(image, square_pad_crop_spec(det.bbox, size, pad_value))
    if kind is ViewKind.FG_M:
        masked = np.where(mask[:, :, None], image.data, np.uint8(pad_value))
        return crop_and_pad(PixelBuffer(masked), square_pad_crop_spec(det.bbox, size, pad_value))
    out = image.data.copy()
    if kind is ViewKind.BG_S:
        out[mask] = pad_value
    else:
        x0, y0, x1, y1 = bbox_to_pixels(det.bbox, image.width, image.height)
        out[y0:y1, x0:x1] = pad_value
    return PixelBuffer(out)


def fallback_gate(dets: Sequence[DetectionRecord], tau: float = DEFAULT_TAU) -> DetectionRecord | None:
    """Best detection to decompose with, or None when the full image should be used.

    None is returned when there is no detection or the best score does not
    exceed ``tau`` (a score exactly at the threshold falls back).
    Score ties go to the first record.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    if not dets:
        return None
    best = max(dets, key=lambda d: d.score)
    return best if best.score > tau else None


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

_DET_HEADER = ["id", "prompt", "score", "x0", "y0", "x1", "y1", "mask_rle"]


def load_detections(path: str | Path) -> list[DetectionRecord]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:7] != _DET_HEADER[:7]:
            raise ValidationError(f"{path}: expected header {','.join(_DET_HEADER)}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) not in (7, 8):
                raise ValidationError(f"{path}: malformed detection row {row[:3]}")
            try:
                score, *box = (float(v) for v in row[2:7])
            except ValueError as e:
                raise ValidationError(f"{path}: {e}") from None
            mask = row[7] if len(row) == 8 and row[7] else None
            out.append(DetectionRecord(row[0], row[1], score, tuple(box), mask))
    return out


def save_detections(path: str | Path, dets: Iterable[DetectionRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_DET_HEADER)
        for d in dets:
            w.writerow(
                [d.sample_id, d.prompt, format_float(d.score)]
                + [format_float(v) for v in d.bbox]
                + [d.mask_rle or ""]
            )


# raw format: little-endian uint16 width, height, channels, reserved (8 bytes) then pixels
_RAW_HEADER = struct.Struct("<HHHH")


def load_image(path: str | Path) -> PixelBuffer:
    path = Path(path)
    if path.suffix.lower() == ".raw":
        blob = path.read_bytes()
        if len(blob) < _RAW_HEADER.size:
            raise ValidationError(f"{path}: truncated raw header")
        W, H, C, _ = _RAW_HEADER.unpack_from(blob)
        body = np.frombuffer(blob, dtype=np.uint8, offset=_RAW_HEADER.size)
        if body.size != W * H * C:
            raise ValidationError(f"{path}: {body.size} pixel bytes, header says {W}x{H}x{C}")
        return PixelBuffer(body.reshape(H, W, C))
    from PIL import Image

    with Image.open(path) as im:
        return PixelBuffer(np.asarray(im))


def save_image(path: str | Path, image: PixelBuffer) -> None:
    path = Path(path)
    if path.suffix.lower() == ".raw":
        path.write_bytes(_RAW_HEADER.pack(image.width, image.height, image.channels, 0) + image.data.tobytes())
        return
    from PIL import Image

    data = image.data[:, :, 0] if image.channels == 1 else image.data
    Image.fromarray(data).save(path)
