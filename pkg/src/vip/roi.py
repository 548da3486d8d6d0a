"""Map pixel-space bounding boxes to the patch tokens they touch."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .vit import ViTConfig


class EmptyRoiError(ValueError):
    """The region of interest selects no patch token."""


class BoxBoundsError(ValueError):
    """A bounding box is malformed or leaves the image frame."""


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``, origin at the top-left."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> "BoundingBox":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise BoxBoundsError(f"box {self.as_tuple()} is degenerate or outside the {width}x{height} frame")
        return self

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)


@dataclass(frozen=True)
class RoiTokenSet:
    indices: Tuple[int, ...]
    seq_len: int

    def __post_init__(self):
        if not self.indices:
            raise EmptyRoiError("ROI token set is empty; at least one patch must intersect a box")
        if any(i < 1 or i >= self.seq_len for i in self.indices):
            raise ValueError(f"ROI indices must lie in [1, {self.seq_len - 1}], got {self.indices}")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, idx) -> bool:
        return idx in self.indices

    @property
    def background(self) -> Tuple[int, ...]:
        """Patch tokens outside the ROI (CLS excluded)."""
        inside = set(self.indices)
        return tuple(i for i in range(1, self.seq_len) if i not in inside)


def _as_box(box) -> BoundingBox:
    return box if isinstance(box, BoundingBox) else BoundingBox(*(int(v) for v in box))


def extract_roi_token_idx(boxes: Iterable, config: ViTConfig) -> RoiTokenSet:
    """Token indices whose patch overlaps any box with positive area.

    Patch ``(row, col)`` on the ``grid x grid`` layout maps to token
    ``1 + row * grid + col``; token 0 is CLS and never selected. Boxes are in
    model-input pixel coordinates.

    Raises:
        BoxBoundsError: A box is degenerate or exceeds the input frame.
        EmptyRoiError: No box was given.
    """
    res, p, grid = config.resolution, config.patch_dim, config.grid_size
    selected = set()
    for raw in boxes:
        box = _as_box(raw).validate(res, res)
        cols = range(box.x0 // p, -(-box.x1 // p))
        rows = range(box.y0 // p, -(-box.y1 // p))
        selected.update(1 + r * grid + c for r in rows for c in cols)
    return RoiTokenSet(tuple(sorted(selected)), config.seq_len)


def roi_pixel_mask(boxes: Iterable, resolution: Union[int, Tuple[int, int]]) -> np.ndarray:
    """``H x W`` float array, 1 inside any box and 0 elsewhere.

    ``resolution`` is a side length or a ``(width, height)`` pair.
    """
    width, height = (resolution, resolution) if isinstance(resolution, (int, np.integer)) else resolution
    mask = np.zeros((height, width), dtype=np.float32)
    for raw in boxes:
        box = _as_box(raw).validate(width, height)
        mask[box.y0:box.y1, box.x0:box.x1] = 1.0
    return mask


def mask_to_tokens(mask: np.ndarray, config: ViTConfig) -> Tuple[int, ...]:
    """Tokens whose patch contains at least one nonzero mask pixel."""
    g, p = config.grid_size, config.patch_dim
    cells = mask.reshape(g, p, g, p).any(axis=(1, 3))
    rows, cols = np.nonzero(cells)
    return tuple(int(1 + r * g + c) for r, c in zip(rows, cols))


def parse_boxes(text: str) -> List[BoundingBox]:
    """Parse ``x0 y0 x1 y1`` lines; ``#`` starts a comment."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise BoxBoundsError(f"line {lineno}: expected 4 integers, got {len(parts)} fields")
        try:
            boxes.append(BoundingBox(*(int(v) for v in parts)))
        except ValueError:
            raise BoxBoundsError(f"line {lineno}: non-integer coordinate in {line!r}") from None
    return boxes


def read_boxes(path: Union[str, Path]) -> List[BoundingBox]:
    return parse_boxes(Path(path).read_text(encoding="ascii"))


def format_boxes(boxes: Sequence) -> str:
    return "".join("%d %d %d %d\n" % _as_box(b).as_tuple() for b in boxes)
