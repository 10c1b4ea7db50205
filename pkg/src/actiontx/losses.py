"""Loss functions. Both return the sum over all elements as a scalar tensor;
callers scale by their own normaliser.
"""
import numpy as np

from .errors import InvalidTargetError, ShapeMismatchError
from .tensor import Function, Tensor


class SigmoidCrossEntropy(Function):
    """Independent logistic loss per class, so several labels may be active."""

    op_id = "sigmoid_cross_entropy"
    catalog = False

    def forward(self, logits, targets):
        if logits.shape != targets.shape:
            raise ShapeMismatchError(logits.shape, targets.shape, self.op_id)
        invalid = targets[(targets != 0) & (targets != 1)]
        if invalid.size:
            raise InvalidTargetError(invalid.tolist())
        self.logits, self.targets = logits, targets
        losses = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray(losses.sum(), dtype=logits.dtype)

    def backward(self, grad):
        probabilities = np.exp(-np.logaddexp(0, -self.logits))
        return grad * (probabilities - self.targets), None


class SmoothL1(Function):
    """``0.5 x^2`` for ``|x| < 1``, ``|x| - 0.5`` otherwise."""

    op_id = "smooth_l1"
    catalog = False

    def forward(self, predictions, targets):
        if predictions.shape != targets.shape:
            raise ShapeMismatchError(predictions.shape, targets.shape, self.op_id)
        self.diff = predictions - targets
        magnitude = np.abs(self.diff)
        losses = np.where(magnitude < 1, 0.5 * self.diff * self.diff, magnitude - 0.5)
        return np.asarray(losses.sum(), dtype=predictions.dtype)

    def backward(self, grad):
        slope = np.clip(self.diff, -1.0, 1.0)
        return grad * slope, -grad * slope


def _target(values, like: Tensor) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return Tensor(np.asarray(values, dtype=like.dtype))


def classification_loss(logits: Tensor, targets) -> Tensor:
    return SigmoidCrossEntropy.apply(logits, _target(targets, logits))


def regression_loss(predictions: Tensor, targets) -> Tensor:
    return SmoothL1.apply(predictions, _target(targets, predictions))
