import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .geometry import clip_boxes, decode_deltas_array, encode_deltas_array
from .geometry import iou_matrix, nms
from .layers import Conv1x1, Conv3d, Initializer, Module
from .tensor import Tensor


logger = logging.getLogger(__name__)

# Decoded proposals narrower or shorter than this (in pixels) are dropped.
MIN_PROPOSAL_SIDE = 1.0


@dataclass
class ProposalSet:
    """Proposals sorted by descending objectness."""

    boxes: np.ndarray
    scores: np.ndarray
    anchors: np.ndarray

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_boxes(cls, boxes) -> "ProposalSet":
        """Fixed boxes, as used in ground-truth box mode, all scored 1."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return cls(boxes, np.ones(len(boxes)), boxes.copy())


class RegionProposalNetwork(Module):
    """A 3x3 convolution followed by sibling 1x1 convolutions for objectness
    logits and box deltas, one of each per anchor and cell.
    """

    def __init__(self, init: Initializer, in_channels, channels, num_anchors, name="rpn"):
        self.num_anchors = num_anchors
        self.conv = Conv3d(init, f"{name}.conv", in_channels, channels, kernel=(1, 3, 3))
        self.objectness = Conv1x1(init, f"{name}.objectness", channels, num_anchors)
        self.deltas = Conv1x1(init, f"{name}.deltas", channels, 4 * num_anchors)

    def __call__(self, center: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns ``(H' * W' * A,)`` logits and ``(H' * W' * A, 4)`` deltas, in
        the anchor order of :func:`~actiontx.geometry.make_anchors`.
        """
        height, width, channels = center.shape
        hidden = T.relu(self.conv(center.reshape(1, 1, height, width, channels)))
        hidden = hidden.reshape(height, width, hidden.shape[-1])
        count = height * width * self.num_anchors
        return self.objectness(hidden).reshape(count), self.deltas(hidden).reshape(count, 4)


def sigmoid(x):
    return np.exp(-np.logaddexp(0, -np.asarray(x, dtype=np.float64)))


def select_proposals(
    logits, deltas, anchors, count: int, image_size: Tuple[float, float],
    nms_iou: float = 0.7,
) -> ProposalSet:
    """Decode, clip to the image, drop degenerate boxes, suppress, keep the top
    `count`. `image_size` is ``(width, height)``.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    boxes = clip_boxes(decode_deltas_array(anchors, deltas), *image_size)
    scores = sigmoid(logits)
    valid = np.flatnonzero(
        (boxes[:, 2] - boxes[:, 0] >= MIN_PROPOSAL_SIDE)
        & (boxes[:, 3] - boxes[:, 1] >= MIN_PROPOSAL_SIDE)
    )
    kept = valid[nms(boxes[valid], scores[valid], nms_iou)][:count]
    logger.debug("%d anchors, %d valid, %d proposals", len(anchors), len(valid), len(kept))
    return ProposalSet(boxes[kept], scores[kept], anchors[kept])


@dataclass
class AnchorTargets:
    labels: np.ndarray
    deltas: np.ndarray

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)


def anchor_targets(
    anchors, gt_boxes, rng: np.random.Generator,
    positive_iou=0.7, negative_iou=0.3, negative_ratio=3,
) -> AnchorTargets:
    """Label anchors 1 (person), 0 (background) or -1 (ignored).

    An anchor is positive at IoU >= `positive_iou` with some person, or when it
    is the best anchor for a person; negative below `negative_iou`. Negatives
    are subsampled to at most `negative_ratio` per positive (at least one
    positive's worth when there are none).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    deltas = np.zeros((len(anchors), 4))

    if len(gt_boxes) == 0:
        labels[:] = 0
    else:
        overlaps = iou_matrix(anchors, gt_boxes)
        best_gt = overlaps.argmax(axis=1)
        best_iou = overlaps.max(axis=1)
        labels[best_iou < negative_iou] = 0
        per_gt_best = overlaps.max(axis=0)
        for gt_index in np.flatnonzero(per_gt_best > 0):
            winners = np.flatnonzero(overlaps[:, gt_index] == per_gt_best[gt_index])
            winners = winners[best_iou[winners] < positive_iou]
            labels[winners] = 1
            best_gt[winners] = gt_index
        labels[best_iou >= positive_iou] = 1
        positive = labels == 1
        if positive.any():
            deltas[positive] = encode_deltas_array(anchors[positive], gt_boxes[best_gt[positive]])

    negatives = np.flatnonzero(labels == 0)
    limit = negative_ratio * max(1, int((labels == 1).sum()))
    if len(negatives) > limit:
        dropped = rng.choice(negatives, size=len(negatives) - limit, replace=False)
        labels[dropped] = -1
    return AnchorTargets(labels, deltas)
