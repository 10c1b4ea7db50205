"""Proposal matching, augmentation, the learning-rate schedule and the trainer.

Every random draw of a training step comes from a Philox stream keyed by
``(seed, step, ...)``, so a run resumed from a checkpoint at step ``s``
continues exactly as the uninterrupted run would have.
"""
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import slice_center
from .checkpoint import load_checkpoint, restore_checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainConfig, config_hash
from .errors import NonFiniteLossError
from .geometry import encode_deltas_array, iou_matrix
from .layers import RunContext
from .losses import classification_loss, regression_loss
from .model import ActionDetector, ModelParams
from .rpn import anchor_targets, select_proposals
from .synthdata import ClipSample
from .tensor import OpGraph, Tensor


logger = logging.getLogger(__name__)

BATCH_STREAM = 1
SAMPLE_STREAM = 2
MAX_CROP_ATTEMPTS = 10
MIN_BOX_SIDE = 1.0


def stream(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass
class ProposalTargets:
    """Per-proposal targets: ``labels`` is ``(R, C + 1)`` with background last."""

    labels: np.ndarray
    deltas: np.ndarray
    positive: np.ndarray
    matched: np.ndarray


def match_proposals(proposals, gt_boxes, gt_labels, iou_threshold=0.5) -> ProposalTargets:
    """Assign each proposal to its best-IoU person.

    At IoU >= `iou_threshold` the proposal is positive: it takes that person's
    action labels (background 0) and a delta target. Otherwise it is background:
    no actions, background 1, no delta target.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.float64).reshape(len(gt_boxes), -1)
    num_classes = gt_labels.shape[1]

    labels = np.zeros((len(proposals), num_classes + 1))
    labels[:, -1] = 1.0
    deltas = np.zeros((len(proposals), 4))
    matched = np.full(len(proposals), -1, dtype=np.int64)
    positive = np.zeros(len(proposals), dtype=bool)
    if len(gt_boxes) and len(proposals):
        overlaps = iou_matrix(proposals, gt_boxes)
        best = overlaps.argmax(axis=1)
        positive = overlaps[np.arange(len(proposals)), best] >= iou_threshold
        matched[positive] = best[positive]
        labels[positive, :num_classes] = gt_labels[best[positive]]
        labels[positive, -1] = 0.0
        if positive.any():
            deltas[positive] = encode_deltas_array(proposals[positive], gt_boxes[best[positive]])
    return ProposalTargets(labels, deltas, positive, matched)


def sample_proposals(targets: ProposalTargets, rng: np.random.Generator,
                     negative_ratio=3) -> np.ndarray:
    """All positives plus at most `negative_ratio` negatives per positive."""
    positives = np.flatnonzero(targets.positive)
    negatives = np.flatnonzero(~targets.positive)
    limit = negative_ratio * max(1, len(positives))
    if len(negatives) > limit:
        negatives = rng.choice(negatives, size=limit, replace=False)
    return np.sort(np.concatenate([positives, negatives]).astype(np.int64))


def flip_boxes(boxes, width) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], axis=1)


def augment(frames: np.ndarray, boxes, labels, rng: np.random.Generator, enabled=True,
            flip_probability=0.5, min_scale=0.8):
    """Random horizontal flip and random crop, resized back to the input size.

    Pixels and boxes move together. Boxes are clipped to the crop; people that
    end up narrower or shorter than a pixel are dropped along with their labels.
    A crop that would drop everyone is redrawn a bounded number of times.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels)
    if not enabled:
        return frames, boxes.copy(), labels.copy()
    _, height, width, _ = frames.shape

    if rng.random() < flip_probability:
        frames = frames[:, :, ::-1]
        boxes = flip_boxes(boxes, width)

    for _ in range(MAX_CROP_ATTEMPTS):
        scale = rng.uniform(min_scale, 1.0)
        crop_h, crop_w = max(1, round(height * scale)), max(1, round(width * scale))
        y0 = int(rng.integers(0, height - crop_h + 1))
        x0 = int(rng.integers(0, width - crop_w + 1))
        shifted = boxes - np.array([x0, y0, x0, y0], dtype=np.float64)
        shifted[:, [0, 2]] = np.clip(shifted[:, [0, 2]], 0, crop_w)
        shifted[:, [1, 3]] = np.clip(shifted[:, [1, 3]], 0, crop_h)
        keep = (shifted[:, 2] - shifted[:, 0] >= MIN_BOX_SIDE) \
            & (shifted[:, 3] - shifted[:, 1] >= MIN_BOX_SIDE)
        if keep.any() or len(boxes) == 0:
            break
    else:
        logger.warning("no crop kept a person after %d attempts, using the full frame",
                       MAX_CROP_ATTEMPTS)
        return np.ascontiguousarray(frames), boxes, labels.copy()

    rows = y0 + ((np.arange(height) + 0.5) * crop_h / height).astype(np.int64)
    cols = x0 + ((np.arange(width) + 0.5) * crop_w / width).astype(np.int64)
    frames = np.ascontiguousarray(frames[:, rows][:, :, cols])
    scale_xy = np.array([width / crop_w, height / crop_h, width / crop_w, height / crop_h])
    return frames, shifted[keep] * scale_xy, labels[keep]


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from `warmup_lr` to `base_lr`, then cosine annealing to 0."""
    if step < config.warmup_steps:
        fraction = step / config.warmup_steps
        return config.warmup_lr + (config.base_lr - config.warmup_lr) * fraction
    span = max(1, config.total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class MomentumSGD:
    """``v = momentum * v + g``; ``p = p - lr * v``."""

    def __init__(self, params: ModelParams, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}

    def step(self, params: ModelParams, lr: float):
        for name, tensor in params.items():
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if self.weight_decay:
                grad = grad + self.weight_decay * tensor.data
            buffer = self.buffers[name]
            buffer *= self.momentum
            buffer += grad
            tensor.data = (tensor.data - lr * buffer).astype(tensor.dtype, copy=False)


def grad_norms(params: ModelParams) -> Dict[str, float]:
    return {
        name: float(np.linalg.norm(tensor.grad)) if tensor.grad is not None else 0.0
        for name, tensor in params.items()
    }


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most `max_norm` (0 disables)."""
    total = math.sqrt(sum(value ** 2 for value in grad_norms(params).values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for tensor in params.values():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * factor
    return total


def collapse_labels(labels) -> np.ndarray:
    """Every person becomes a positive of one trivial class."""
    labels = np.asarray(labels)
    return np.ones((len(labels), 1), dtype=np.float64)


@dataclass
class StepResult:
    step: int
    lr: float
    losses: Dict[str, float]
    grad_norm: float
    wall_time: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(self.losses.values()))

    def as_record(self):
        record = {"step": self.step, "lr": self.lr}
        record.update(self.losses)
        record.update({"total": self.total, "grad_norm": self.grad_norm,
                       "wall_time": self.wall_time})
        return record


LOSS_TERMS = ("rpn_objectness", "rpn_regression")


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _head_losses(name, output, targets, chosen, dtype):
    labels = targets.labels[chosen]
    cls = classification_loss(output.logits, labels) * (1.0 / max(1, len(chosen)))

    positive_rows = np.flatnonzero(targets.positive[chosen])
    if len(positive_rows) == 0:
        return {f"{name}_classification": cls, f"{name}_regression": _zero(dtype)}
    if output.class_agnostic:
        predictions = output.deltas[positive_rows]
        goals = targets.deltas[chosen][positive_rows]
        count = len(positive_rows)
    else:
        rows, classes = np.nonzero(labels[positive_rows, :-1])
        if len(rows) == 0:
            return {f"{name}_classification": cls, f"{name}_regression": _zero(dtype)}
        row_index = positive_rows[rows][:, None]
        col_index = 4 * classes[:, None] + np.arange(4)[None, :]
        predictions = output.deltas[(row_index, col_index)]
        goals = targets.deltas[chosen][positive_rows][rows]
        count = len(rows)
    reg = regression_loss(predictions, goals) * (1.0 / count)
    return {f"{name}_classification": cls, f"{name}_regression": reg}


def sample_losses(model: ActionDetector, sample: ClipSample, step: int, position: int,
                  config: ExperimentConfig) -> Dict[str, Tensor]:
    """All loss terms of one clip, built inside the caller's graph."""
    train = config.train
    rng = stream(train.seed, step, SAMPLE_STREAM, position)
    labels = collapse_labels(sample.labels) if train.action_agnostic else sample.labels
    frames, boxes, labels = augment(sample.frames, sample.boxes, labels, rng, train.augment)
    ctx = RunContext(training=True, seed=train.seed, step=step, sample=position)

    memory = model.features(model.prepare_clip(frames))
    losses = {term: _zero(model.dtype) for term in LOSS_TERMS}
    if train.gt_boxes:
        proposals = boxes
    else:
        center = slice_center(memory)
        logits, deltas = model.rpn(center)
        anchors = model.anchors(*center.shape[:2])
        anchor_goal = anchor_targets(anchors, boxes, rng, train.rpn_positive_iou,
                                     train.rpn_negative_iou, train.negative_ratio)
        sampled, positives = anchor_goal.sampled, anchor_goal.positives
        weight = train.rpn_loss_weight
        losses["rpn_objectness"] = classification_loss(
            logits[sampled], anchor_goal.labels[sampled]
        ) * (weight / max(1, len(sampled)))
        if len(positives):
            losses["rpn_regression"] = regression_loss(
                deltas[positives], anchor_goal.deltas[positives]
            ) * (weight / len(positives))
        proposal_set = select_proposals(
            logits.data, deltas.data, anchors, config.model.proposals,
            model.image_size(memory), config.model.rpn_nms_iou,
        )
        proposals = np.concatenate([proposal_set.boxes, boxes])

    targets = match_proposals(proposals, boxes, labels, train.foreground_iou)
    chosen = sample_proposals(targets, rng, train.negative_ratio)
    if len(chosen) == 0:
        return losses
    outputs, _ = model.head_outputs(proposals[chosen], memory, ctx)
    for name, output in outputs.items():
        losses.update(_head_losses(name, output, targets, chosen, model.dtype))
    return losses


class Trainer:

    def __init__(self, config: ExperimentConfig, model: ActionDetector,
                 dataset: Sequence[ClipSample]):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        self.model = model
        self.dataset = dataset
        self.params = model.parameters()
        self.optimizer = MomentumSGD(self.params, config.train.momentum,
                                     config.train.weight_decay)
        self.step = 0

    def batch_indices(self, step: int) -> np.ndarray:
        train = self.config.train
        rng = stream(train.seed, step, BATCH_STREAM)
        replace = train.batch_size > len(self.dataset)
        return rng.choice(len(self.dataset), size=train.batch_size, replace=replace)

    def train_step(self) -> StepResult:
        train = self.config.train
        step = self.step
        lr = lr_at(step, train)
        started = time.perf_counter()
        for tensor in self.params.values():
            tensor.grad = None

        totals: Dict[str, float] = {}
        indices = self.batch_indices(step)
        for position, index in enumerate(indices):
            graph = OpGraph()
            with graph:
                losses = sample_losses(self.model, self.dataset[int(index)], step, position,
                                       self.config)
                total = sum(losses.values()) * (1.0 / len(indices))
            if total.requires_grad:
                T.backward(graph, total)
            for name, value in losses.items():
                totals[name] = totals.get(name, 0.0) + float(value.item()) / len(indices)

        norms = grad_norms(self.params)
        finite = all(math.isfinite(v) for v in totals.values()) \
            and all(math.isfinite(v) for v in norms.values())
        if not finite:
            self.logger.error("non-finite loss at step %d (lr %.4g): %s; gradient norms %s",
                              step, lr, totals, norms)
            raise NonFiniteLossError(step, lr, totals, norms)

        norm = clip_grad_norm(self.params, train.clip_grad_norm)
        self.optimizer.step(self.params, lr)
        self.step += 1
        result = StepResult(step, lr, totals, norm, time.perf_counter() - started)
        self.logger.debug("step %d lr %.4g total %.4f", step, lr, result.total)
        return result

    def save(self, path):
        save_checkpoint(path, self.params, self.optimizer.buffers, self.step,
                        config_hash(self.config))

    def resume(self, path):
        checkpoint = load_checkpoint(path, config_hash(self.config))
        restore_checkpoint(checkpoint, self.params, self.optimizer.buffers)
        self.step = checkpoint.step
        self.logger.info("resumed from %s at step %d", path, self.step)

    def run(self, output_dir=None, steps: Optional[int] = None) -> List[StepResult]:
        """Train until `steps` more steps (default: until ``total_steps``),
        logging one JSON line per step and checkpointing periodically.
        """
        train = self.config.train
        end = train.total_steps if steps is None else min(train.total_steps, self.step + steps)
        output_dir = Path(output_dir) if output_dir is not None else None
        log = None
        if output_dir is not None:
            output_dir.mkdir(parents=True, exist_ok=True)
            log = open(output_dir / "train_log.jsonl", "a", encoding="utf-8")
        results = []
        try:
            while self.step < end:
                result = self.train_step()
                results.append(result)
                if log is not None:
                    log.write(json.dumps(result.as_record(), sort_keys=True) + "\n")
                if result.step % train.log_every == 0:
                    self.logger.info("step %d lr %.4f loss %.4f", result.step, result.lr,
                                     result.total)
                if output_dir is not None and train.checkpoint_every \
                        and self.step % train.checkpoint_every == 0:
                    self.save(output_dir / f"step{self.step:06d}.ckpt")
        finally:
            if log is not None:
                log.close()
        if output_dir is not None:
            self.save(output_dir / "final.ckpt")
        return results
