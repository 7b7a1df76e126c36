"""Axis-aligned boxes, proposal matching, box deltas and mask-grid overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, DomainError, MatchError

MASK_SIZE = 14


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DomainError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_proposal(p: Box, gts: Sequence[tuple[Box, int]]) -> tuple[Box, int, float]:
    """Ground truth with the highest IoU against ``p``; first listed wins ties."""
    if not gts:
        raise MatchError("cannot match a proposal against an empty ground-truth list")
    best = None
    for box, cat in gts:
        score = iou(p, box)
        if best is None or score > best[2]:
            best = (box, cat, score)
    return best


def encode_deltas(p: Box, b: Box) -> BoxDelta:
    pcx, pcy = p.center
    bcx, bcy = b.center
    return BoxDelta(
        (bcx - pcx) / p.width,
        (bcy - pcy) / p.height,
        math.log(b.width / p.width),
        math.log(b.height / p.height),
    )


def decode_deltas(p: Box, d: Sequence[float]) -> Box:
    dx, dy, dw, dh = d
    pcx, pcy = p.center
    cx = pcx + dx * p.width
    cy = pcy + dy * p.height
    w = p.width * math.exp(dw)
    h = p.height * math.exp(dh)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


# Vectorized forms over (N, 4) arrays, used by training and evaluation.

def encode_deltas_array(p: np.ndarray, b: np.ndarray) -> np.ndarray:
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    dx = ((b[:, 0] + b[:, 2]) - (p[:, 0] + p[:, 2])) * 0.5 / pw
    dy = ((b[:, 1] + b[:, 3]) - (p[:, 1] + p[:, 3])) * 0.5 / ph
    return np.stack([dx, dy, np.log(bw / pw), np.log(bh / ph)], axis=1)


def decode_deltas_array(p: np.ndarray, d: np.ndarray) -> np.ndarray:
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = 0.5 * (p[:, 0] + p[:, 2]) + d[:, 0] * pw
    cy = 0.5 * (p[:, 1] + p[:, 3]) + d[:, 1] * ph
    w = pw * np.exp(d[:, 2])
    h = ph * np.exp(d[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def mask_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Cell-level IoU of two boolean grids; two empty grids agree perfectly."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise DimensionError(f"mask_iou: grids {pred.shape} and {target.shape} must be equal and square")
    union = np.count_nonzero(pred | target)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & target) / union


def grid_cell_centers(p: Box, size: int = MASK_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Image coordinates of the centres of an SxS grid laid over ``p``.

    Returns (xs, ys), each of length ``size``; row index follows y.
    """
    t = (np.arange(size) + 0.5) / size
    return p.x1 + t * p.width, p.y1 + t * p.height


def box_cells(p: Box, b: Box, size: int = MASK_SIZE) -> np.ndarray:
    """Boolean SxS grid (in ``p``'s frame) of cells whose centre lies inside ``b``."""
    xs, ys = grid_cell_centers(p, size)
    inside_x = (xs >= b.x1) & (xs <= b.x2)
    inside_y = (ys >= b.y1) & (ys <= b.y2)
    return inside_y[:, None] & inside_x[None, :]
