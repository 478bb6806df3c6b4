"""Bounding-box formats, conversions, and IoU / generalized IoU.

All coordinates are image fractions in [0, 1]. Pixel coordinates appear
only at file-format boundaries (proposal caches, COCO JSON).

Conventions:
- zero-area boxes are legal inputs and have IoU 0 against everything,
  including the zero-union case;
- GIoU of two boxes degenerated to the same point has an undefined hull
  term and is reported as 0 with a degenerate flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidBoxError

# Tolerance for "in [0,1]" checks so float round-off near the borders
# does not reject otherwise valid boxes.
_EDGE_TOL = 1e-9


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise InvalidBoxError(f"non-finite box coordinate: {values}")


@dataclass(frozen=True)
class BoxXYXY:
    """Corner-format box (x1, y1, x2, y2), image fractions."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        _check_finite(self.x1, self.y1, self.x2, self.y2)
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidBoxError(f"corners out of order: {self}")
        for v in (self.x1, self.y1, self.x2, self.y2):
            if v < -_EDGE_TOL or v > 1.0 + _EDGE_TOL:
                raise InvalidBoxError(f"coordinate outside [0,1]: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class BoxCXCYWH:
    """Center-format box (cx, cy, w, h), image fractions."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        _check_finite(self.cx, self.cy, self.w, self.h)
        if self.w < 0 or self.h < 0:
            raise InvalidBoxError(f"negative extent: {self}")
        if not (-_EDGE_TOL <= self.cx <= 1.0 + _EDGE_TOL) or not (
            -_EDGE_TOL <= self.cy <= 1.0 + _EDGE_TOL
        ):
            raise InvalidBoxError(f"center outside [0,1]: {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class BoxBatch:
    """An ordered collection of corner-format boxes."""

    boxes: tuple[BoxXYXY, ...]

    def __init__(self, boxes: Sequence[BoxXYXY] = ()):
        object.__setattr__(self, "boxes", tuple(boxes))

    @property
    def count(self) -> int:
        return len(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def __getitem__(self, i):
        return self.boxes[i]

    def to_array(self) -> np.ndarray:
        """Return an (N, 4) float64 array of xyxy rows."""
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BoxBatch":
        return cls([BoxXYXY(*row) for row in np.asarray(arr, dtype=np.float64)])


def cxcywh_to_xyxy(b: BoxCXCYWH, clamp: bool = True) -> BoxXYXY:
    """Convert center format to corner format, clamping into [0,1]."""
    x1 = b.cx - b.w / 2.0
    y1 = b.cy - b.h / 2.0
    x2 = b.cx + b.w / 2.0
    y2 = b.cy + b.h / 2.0
    if clamp:
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(1.0, x2), min(1.0, y2)
        x2, y2 = max(x1, x2), max(y1, y2)
    return BoxXYXY(x1, y1, x2, y2)


def xyxy_to_cxcywh(b: BoxXYXY) -> BoxCXCYWH:
    """Convert corner format to center format (exact inverse when unclamped)."""
    return BoxCXCYWH(
        (b.x1 + b.x2) / 2.0,
        (b.y1 + b.y2) / 2.0,
        b.x2 - b.x1,
        b.y2 - b.y1,
    )


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union; 0 by convention when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BoxXYXY, b: BoxXYXY, with_flag: bool = False):
    """Generalized IoU in [-1, 1].

    giou = iou - (hull - union) / hull with hull the smallest enclosing
    box. When the hull itself is degenerate (both boxes collapse to the
    same point) the value is reported as 0; pass with_flag=True to also
    receive the degeneracy indicator.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if hull <= 0.0:
        return (0.0, True) if with_flag else 0.0
    iou_val = inter / union if union > 0.0 else 0.0
    val = iou_val - (hull - union) / hull
    return (val, False) if with_flag else val


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) xyxy arrays.

    Zero-union pairs yield 0 exactly (no epsilon fudging).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def generalized_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between (N,4) and (M,4) xyxy arrays.

    Degenerate hulls (both boxes the same point) map to 0, matching the
    scalar convention.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iou_m = box_iou_matrix(a, b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    hull_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    hull_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull_wh = np.clip(hull_rb - hull_lt, 0.0, None)
    hull = hull_wh[:, :, 0] * hull_wh[:, :, 1]
    penalty = np.zeros_like(hull)
    np.divide(hull - union, hull, out=penalty, where=hull > 0)
    return np.where(hull > 0, iou_m - penalty, 0.0)
