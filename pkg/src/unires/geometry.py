"""Boxes, binary masks, RLE codec, IoU and ROI Align."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class InvalidInputError(ValueError):
    pass


class CorruptMaskError(ValueError):
    pass


class CoordSpace(enum.Enum):
    PIXEL = "pixel"
    NORM999 = "norm999"


class Level(enum.Enum):
    IMAGE = "image"
    HIGHRES = "highres"
    OBJECT = "object"
    PART = "part"
    GROUNDING = "grounding"


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float
    space: CoordSpace = CoordSpace.PIXEL

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise InvalidInputError(f"unordered box {self.as_tuple()}")
        if self.space is CoordSpace.NORM999:
            for c in self.as_tuple():
                if c != int(c) or not 0 <= c <= 999:
                    raise InvalidInputError(f"NORM999 coordinate out of range: {c}")

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def normalize_box(box: BoundingBox, img_w: int, img_h: int) -> BoundingBox:
    """Map a pixel box to integer coordinates in [0, 999]."""
    if box.space is CoordSpace.NORM999:
        return box
    if img_w < 1 or img_h < 1:
        raise InvalidInputError(f"degenerate image size {img_w}x{img_h}")

    def conv(c, size):
        return min(999, max(0, _round_half_up(c / size * 999)))

    return BoundingBox(conv(box.x0, img_w), conv(box.y0, img_h),
                       conv(box.x1, img_w), conv(box.y1, img_h), CoordSpace.NORM999)


def full_image_box(img_w: int, img_h: int) -> BoundingBox:
    return BoundingBox(0, 0, img_w, img_h)


# --- masks -----------------------------------------------------------------
# A BinaryMask is a 2-D numpy bool array; height/width are its shape.

BinaryMask = np.ndarray


def empty_mask(h: int, w: int) -> BinaryMask:
    return np.zeros((h, w), dtype=bool)


def as_mask(m) -> BinaryMask:
    m = np.asarray(m)
    if m.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise InvalidInputError("mask values must be 0/1")
        m = m.astype(bool)
    return m


@dataclass
class RleMask:
    height: int
    width: int
    counts: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        h, w = obj["size"]
        return cls(int(h), int(w), [int(c) for c in obj["counts"]])


def rle_encode(mask) -> RleMask:
    m = as_mask(mask)
    h, w = m.shape
    flat = m.flatten(order="F").astype(np.int8)
    if flat.size == 0:
        return RleMask(h, w, [])
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return RleMask(h, w, counts)


def rle_decode(rle: RleMask) -> BinaryMask:
    h, w = rle.height, rle.width
    counts = np.asarray(rle.counts, dtype=np.int64)
    if (counts < 0).any():
        raise CorruptMaskError("negative run length")
    if counts.sum() != h * w:
        raise CorruptMaskError(f"run lengths sum to {counts.sum()}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def mask_area(mask) -> int:
    return int(np.count_nonzero(mask))


def mask_iou(a, b) -> float:
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_mask(box: BoundingBox, h: int, w: int) -> BinaryMask:
    m = empty_mask(h, w)
    m[int(round(box.y0)):int(round(box.y1)), int(round(box.x0)):int(round(box.x1))] = True
    return m


def mask_to_box(mask) -> BoundingBox | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# --- feature maps ----------------------------------------------------------

@dataclass
class FeatureMap:
    """Row-major (grid_h*grid_w) x C features covering an image of size img_h x img_w."""

    grid_h: int
    grid_w: int
    values: torch.Tensor
    level: Level
    img_h: int | None = None
    img_w: int | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid_h * self.grid_w:
            raise InvalidInputError(
                f"values shape {tuple(self.values.shape)} does not match grid {self.grid_h}x{self.grid_w}")
        if self.img_h is None:
            self.img_h = self.grid_h
        if self.img_w is None:
            self.img_w = self.grid_w

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def grid(self) -> torch.Tensor:
        """C x H x W view."""
        return self.values.T.reshape(self.channels, self.grid_h, self.grid_w)


def _bilinear(grid: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample C x H x W grid at continuous cell-centre coordinates; returns C x *ys.shape."""
    _, h, w = grid.shape
    ys = ys.clamp(0, h - 1)
    xs = xs.clamp(0, w - 1)
    y0 = ys.floor().long().clamp(max=h - 1)
    x0 = xs.floor().long().clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    ly = (ys - y0).to(grid.dtype)
    lx = (xs - x0).to(grid.dtype)
    hy, hx = 1 - ly, 1 - lx
    return (grid[:, y0, x0] * (hy * hx) + grid[:, y0, x1] * (hy * lx)
            + grid[:, y1, x0] * (ly * hx) + grid[:, y1, x1] * (ly * lx))


def roi_align_boxes(fm: FeatureMap, boxes: Sequence[BoundingBox], out_h: int = 7, out_w: int = 7,
                    samples_per_bin: int = 2) -> torch.Tensor:
    """ROI Align over several pixel boxes; returns N x out_h*out_w x C."""
    c = fm.channels
    if not boxes:
        return fm.values.new_zeros((0, out_h * out_w, c))
    sy = fm.grid_h / fm.img_h
    sx = fm.grid_w / fm.img_w
    coords = []
    for box in boxes:
        if box.space is not CoordSpace.PIXEL:
            raise InvalidInputError("roi_align expects pixel boxes")
        if box.width <= 0 or box.height <= 0:
            raise InvalidInputError(f"zero-area box {box.as_tuple()}")
        if box.x0 >= fm.img_w or box.y0 >= fm.img_h or box.x1 <= 0 or box.y1 <= 0:
            raise InvalidInputError(f"box {box.as_tuple()} outside feature extent")
        coords.append((box.x0 * sx - 0.5, box.y0 * sy - 0.5, box.x1 * sx - 0.5, box.y1 * sy - 0.5))
    b = torch.tensor(coords, dtype=torch.float64)
    s = samples_per_bin
    # fractional offsets of sample points inside the box, per axis
    fy = (torch.arange(out_h * s, dtype=torch.float64) + 0.5) / (out_h * s)
    fx = (torch.arange(out_w * s, dtype=torch.float64) + 0.5) / (out_w * s)
    ys = b[:, 1:2] + fy[None] * (b[:, 3:4] - b[:, 1:2])          # N x out_h*s
    xs = b[:, 0:1] + fx[None] * (b[:, 2:3] - b[:, 0:1])          # N x out_w*s
    n = len(boxes)
    yy = ys[:, :, None].expand(n, out_h * s, out_w * s)
    xx = xs[:, None, :].expand(n, out_h * s, out_w * s)
    samples = _bilinear(fm.grid(), yy, xx)                       # C x N x Hs x Ws
    pooled = samples.reshape(c, n, out_h, s, out_w, s).mean(dim=(3, 5))
    return pooled.permute(1, 2, 3, 0).reshape(n, out_h * out_w, c)


def roi_align(fm: FeatureMap, box: BoundingBox, out_h: int = 7, out_w: int = 7,
              samples_per_bin: int = 2) -> FeatureMap:
    pooled = roi_align_boxes(fm, [box], out_h, out_w, samples_per_bin)[0]
    return FeatureMap(out_h, out_w, pooled, fm.level)
