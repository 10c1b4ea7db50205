"""Axis-aligned boxes in keyframe pixel coordinates.

Boxes travel through the pipeline as ``(N, 4)`` arrays of ``x1, y1, x2, y2``;
:class:`Box` is the validated single-box form used at the edges.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import GeometryError


# Largest log-scale change accepted when decoding, so exp() cannot overflow.
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"Box has non-finite coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"Box corners are out of order: {coords}")

    @classmethod
    def from_array(cls, values) -> "Box":
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class Detection:
    box: Box
    scores: np.ndarray
    objectness: float
    background: float = 0.0
    class_boxes: Optional[np.ndarray] = None

    def box_for(self, class_id: int) -> Box:
        if self.class_boxes is None:
            return self.box
        return Box.from_array(self.class_boxes[class_id])


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    left = np.maximum(a[:, None, 0], b[None, :, 0])
    top = np.maximum(a[:, None, 1], b[None, :, 1])
    right = np.minimum(a[:, None, 2], b[None, :, 2])
    bottom = np.minimum(a[:, None, 3], b[None, :, 3])
    intersection = np.clip(right - left, 0, None) * np.clip(bottom - top, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - intersection
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, intersection / np.where(union > 0, union, 1), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def _centers(boxes):
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * widths, boxes[:, 1] + 0.5 * heights, widths, heights


def encode_deltas_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Offsets ``(dcx/w, dcy/h, log(w'/w), log(h'/h))`` taking anchors to targets."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("Cannot encode deltas against a zero-width or zero-height anchor")
    tx, ty, tw, th = _centers(targets)
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_deltas_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("Cannot decode deltas against a zero-width or zero-height anchor")
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_deltas(anchor: Box, target: Box) -> np.ndarray:
    return encode_deltas_array(anchor.as_array(), target.as_array())[0]


def decode_deltas(anchor: Box, deltas: Sequence[float]) -> Box:
    return Box.from_array(decode_deltas_array(anchor.as_array(), deltas)[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score, ties by lower index; a box is kept
    when its IoU with every already kept box is below `iou_threshold`.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    kept = []
    for index in order:
        if suppressed[index]:
            continue
        kept.append(int(index))
        suppressed |= overlaps[index] >= iou_threshold
    return kept


def make_anchors(
    feature_h: int, feature_w: int, stride: float,
    scales: Sequence[float], aspect_ratios: Sequence[float],
) -> np.ndarray:
    """One anchor per (scale, ratio) centred on every feature cell.

    `aspect_ratios` are height over width; a scale is the side of the square
    with the same area. Rows are ordered by cell row, cell column, scale, ratio.
    """
    shapes = []
    for scale in scales:
        for ratio in aspect_ratios:
            shapes.append((scale / math.sqrt(ratio), scale * math.sqrt(ratio)))
    shapes = np.asarray(shapes, dtype=np.float64)

    rows, cols = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    cx = ((cols + 0.5) * stride).reshape(-1, 1)
    cy = ((rows + 0.5) * stride).reshape(-1, 1)
    half_w = 0.5 * shapes[None, :, 0]
    half_h = 0.5 * shapes[None, :, 1]
    anchors = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
    return anchors.reshape(-1, 4)
