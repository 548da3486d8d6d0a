"""Binary PPM I/O, bilinear resizing, box rescaling and heatmap rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from .roi import BoundingBox


class PpmFormatError(ValueError):
    """The file is not a P6 PPM this module can decode."""


@dataclass
class RawImage:
    """8-bit RGB image stored as an ``H x W x 3`` uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.size != 3 * self.width * self.height:
            raise ValueError(
                f"{self.pixels.size} samples for a {self.width}x{self.height} RGB image"
            )
        self.pixels = self.pixels.reshape(self.height, self.width, 3)

    def to_chw(self, dtype=np.float32) -> np.ndarray:
        """Channel-first float array in ``[0, 255]``, the layout the encoder consumes."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=dtype)

    @classmethod
    def from_chw(cls, array: np.ndarray) -> "RawImage":
        """Round a ``3 x H x W`` float image to 8 bits."""
        arr = np.clip(np.rint(np.asarray(array, dtype=np.float64)), 0, 255).astype(np.uint8)
        _, h, w = arr.shape
        return cls(w, h, arr.transpose(1, 2, 0))


def _read_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmFormatError("header truncated")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> RawImage:
    magic = data[:2]
    if magic == b"P3":
        raise PpmFormatError("ASCII PPM (P3) is not supported; convert the file to binary P6")
    if magic != b"P6":
        raise PpmFormatError(f"bad magic {magic!r}, expected b'P6'")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _read_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PpmFormatError(f"{name}: not an integer ({token!r})") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PpmFormatError(f"maxval {maxval} unsupported, only 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PpmFormatError("missing whitespace after maxval")
    pos += 1
    need = 3 * width * height
    body = data[pos:pos + need]
    if len(body) < need:
        raise PpmFormatError(f"pixel data truncated: {len(body)} of {need} bytes")
    return RawImage(width, height, np.frombuffer(body, dtype=np.uint8))


def encode_ppm(image: RawImage) -> bytes:
    header = b"P6\n%d %d\n255\n" % (image.width, image.height)
    return header + np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes()


def read_ppm(path: Union[str, Path]) -> RawImage:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image: RawImage, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_ppm(image))


def _size(target) -> Tuple[int, int]:
    if isinstance(target, (int, np.integer)):
        return int(target), int(target)
    w, h = target
    return int(w), int(h)


def _bilinear_axis(src: int, dst: int):
    coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0, src - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def resize_array(array: np.ndarray, target) -> np.ndarray:
    """Bilinear resize (half-pixel centres) of an ``H x W x C`` float array."""
    out_w, out_h = _size(target)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    arr = np.asarray(array, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_bilinear(image: RawImage, target) -> RawImage:
    """Resize to ``target`` (side length or ``(width, height)``)."""
    out_w, out_h = _size(target)
    if (out_w, out_h) == (image.width, image.height):
        return RawImage(image.width, image.height, image.pixels.copy())
    out = resize_array(image.pixels, (out_w, out_h))
    return RawImage(out_w, out_h, np.clip(np.rint(out), 0, 255).astype(np.uint8))


def scale_box(box: BoundingBox, from_size, to_size) -> BoundingBox:
    """Rescale a box between frames; edges round outward so coverage never shrinks."""
    fw, fh = _size(from_size)
    tw, th = _size(to_size)
    sx, sy = tw / fw, th / fh
    return BoundingBox(
        max(0, math.floor(box.x0 * sx)),
        max(0, math.floor(box.y0 * sy)),
        min(tw, math.ceil(box.x1 * sx)),
        min(th, math.ceil(box.y1 * sy)),
    )


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

# Anchor colours (RGB) of the 256-entry map, evenly spaced and linearly
# interpolated: dark purple -> blue -> teal -> green -> yellow.
COLORMAP_ANCHORS = np.array([
    (68, 1, 84),
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),
], dtype=np.float64)


def _build_colormap() -> np.ndarray:
    pos = np.linspace(0, len(COLORMAP_ANCHORS) - 1, 256)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(COLORMAP_ANCHORS) - 1)
    frac = (pos - lo)[:, None]
    lut = COLORMAP_ANCHORS[lo] * (1 - frac) + COLORMAP_ANCHORS[hi] * frac
    return np.rint(lut).astype(np.uint8)


COLORMAP = _build_colormap()
MIDPOINT = 128


def render_heatmap(values, resolution) -> RawImage:
    """Colour-map a scalar field.

    ``values`` is a 2-D grid (per-patch or per-pixel) or a 1-D vector of
    square length (per-patch, row-major). Values are min-max normalised, a
    constant field maps to the colormap midpoint, and the grid is upsampled to
    ``resolution`` by nearest neighbour.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        side = math.isqrt(vals.size)
        if side * side != vals.size:
            raise ValueError(f"1-D field of length {vals.size} is not a square grid")
        vals = vals.reshape(side, side)
    if vals.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D field, got shape {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("heatmap values must be finite")
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        idx = np.rint((vals - lo) / (hi - lo) * 255).astype(int)
    else:
        idx = np.full(vals.shape, MIDPOINT)
    out_w, out_h = _size(resolution)
    gh, gw = idx.shape
    rows = np.arange(out_h) * gh // out_h
    cols = np.arange(out_w) * gw // out_w
    return RawImage(out_w, out_h, COLORMAP[idx[rows][:, cols]])


def render_perturbation(delta: np.ndarray) -> RawImage:
    """Heatmap of ``|delta|`` summed over channels, at the perturbation's own size."""
    field = np.abs(np.asarray(delta, dtype=np.float64)).sum(axis=0)
    h, w = field.shape
    return render_heatmap(field, (w, h))


def side_by_side(images: Sequence[RawImage], gap: int = 2) -> RawImage:
    """Concatenate images horizontally on a black background, top-aligned."""
    height = max(im.height for im in images)
    width = sum(im.width for im in images) + gap * (len(images) - 1)
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    x = 0
    for im in images:
        canvas[: im.height, x:x + im.width] = im.pixels
        x += im.width + gap
    return RawImage(width, height, canvas)
