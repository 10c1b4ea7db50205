"""RoIPool on one frame and ST-RoIPool over the whole clip tube.

Boxes are given in image pixels. They are clipped to the image, mapped to
feature coordinates (``pixel / stride - 0.5``, so cell centres land on
integers) and sampled bilinearly on a 14x14 grid of bin centres, followed by
a 2x2 max pool down to 7x7.
"""
from typing import Tuple, Union

import numpy as np

from . import tensor as T
from .errors import PoolingError, ShapeMismatchError
from .geometry import Box, clip_boxes
from .tensor import Tensor


SAMPLING_GRID = 14
POOLED_SIZE = 7


def _as_boxes(boxes: Union[Box, np.ndarray]) -> Tuple[np.ndarray, bool]:
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :], True
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), False


def sampling_grid(boxes: np.ndarray, stride: float, height: int, width: int):
    """Fractional row and column coordinates, ``(R, 14)`` each."""
    clipped = clip_boxes(boxes, width * stride, height * stride)
    scaled = clipped / stride - 0.5
    box_w = scaled[:, 2] - scaled[:, 0]
    box_h = scaled[:, 3] - scaled[:, 1]
    for index in np.flatnonzero((box_w <= 0) | (box_h <= 0)):
        raise PoolingError(boxes[index], scaled[index])
    steps = (np.arange(SAMPLING_GRID) + 0.5) / SAMPLING_GRID
    ys = scaled[:, 1:2] + steps[None, :] * box_h[:, None]
    xs = scaled[:, 0:1] + steps[None, :] * box_w[:, None]
    return ys, xs


def roipool(features: Tensor, boxes, stride: float = 16) -> Tensor:
    """Pool ``(H', W', F)`` features to ``(7, 7, F)`` per box.

    A single :class:`~actiontx.geometry.Box` gives ``(7, 7, F)``; an ``(R, 4)``
    array gives ``(R, 7, 7, F)``.
    """
    if features.ndim != 3:
        raise ShapeMismatchError((0, 0, 0), features.shape, "roipool")
    array, single = _as_boxes(boxes)
    height, width, _ = features.shape
    ys, xs = sampling_grid(array, stride, height, width)
    pooled = T.max_pool(T.bilinear_sample(features, ys, xs), size=SAMPLING_GRID // POOLED_SIZE)
    return pooled[0] if single else pooled


def st_roipool(features: Tensor, boxes, stride: float = 16) -> Tensor:
    """Pool every frame of ``(T', H', W', F)`` features with the same boxes.

    Returns ``(T', 7, 7, F)`` for a single box, ``(R, T', 7, 7, F)`` otherwise.
    Slice ``t`` equals :func:`roipool` of frame ``t``.
    """
    if features.ndim != 4:
        raise ShapeMismatchError((0, 0, 0, 0), features.shape, "st_roipool")
    array, single = _as_boxes(boxes)
    frames, height, width, channels = features.shape
    stacked = features.transpose(1, 2, 0, 3).reshape(height, width, frames * channels)
    ys, xs = sampling_grid(array, stride, height, width)
    pooled = T.max_pool(T.bilinear_sample(stacked, ys, xs), size=SAMPLING_GRID // POOLED_SIZE)
    tube = pooled.reshape(len(array), POOLED_SIZE, POOLED_SIZE, frames, channels)
    tube = tube.transpose(0, 3, 1, 2, 4)
    return tube[0] if single else tube
