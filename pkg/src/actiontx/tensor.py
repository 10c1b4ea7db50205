"""Dense tensors with a fixed catalog of differentiable operations.

Every operation is a :class:`Function` with an analytic ``backward``. Operations
executed inside an active :class:`OpGraph` are recorded in execution order, and
:func:`backward` walks that tape in reverse to accumulate gradients into the
leaf tensors (the parameters). Outside a graph nothing is recorded, which is
how inference runs.
"""
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonDeterministicGraphError, NonScalarLossError, ShapeMismatchError


logger = logging.getLogger(__name__)

LAYER_NORM_EPSILON = 1e-6

_CATALOG: Dict[str, type] = {}
_active_graph = contextvars.ContextVar("actiontx_active_graph", default=None)


class Tensor:

    def __init__(self, data, requires_grad=False, name=None):
        array = np.asarray(data)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data = array
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __mul__(self, other):
        return multiply(self, self._lift(other))

    def __rmul__(self, other):
        return multiply(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class OpNode:
    op_id: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    function: "Function"

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(id(tensor) for tensor in self.inputs)


class OpGraph:
    """Tape of operations in execution order.

    Use as a context manager; operations whose inputs require gradients are
    recorded while it is active. The active graph is held in a context
    variable, so graphs on different threads do not interfere.
    """

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.nodes: List[OpNode] = []
        self._produced = set()
        self._leaves: Dict[int, Tensor] = {}
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, *exc_info):
        _active_graph.reset(self._tokens.pop())

    def record(self, function, inputs, output):
        for tensor in inputs:
            if tensor.requires_grad and id(tensor) not in self._produced:
                self._leaves.setdefault(id(tensor), tensor)
        self.nodes.append(OpNode(function.op_id, tuple(inputs), output, function))
        self._produced.add(id(output))

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def live_dropout_ops(self) -> List[str]:
        return [node.op_id for node in self.nodes if not node.function.deterministic]


class Function:
    """Base class of every differentiable operation.

    `forward` receives the numpy arrays of the input tensors and returns the
    output array; `backward` receives the gradient of the output and returns
    one gradient (or None) per input.
    """

    op_id: Optional[str] = None
    catalog = True
    deterministic = True

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.op_id is not None and cls.catalog:
            _CATALOG[cls.op_id] = cls

    def forward(self, *arrays):
        raise NotImplementedError(f"{self.__class__.__name__}.forward")

    def backward(self, grad):
        raise NotImplementedError(f"{self.__class__.__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **options) -> Tensor:
        function = cls(**options)
        output = Tensor(function.forward(*(tensor.data for tensor in inputs)))
        graph = _active_graph.get()
        if graph is not None and any(tensor.requires_grad for tensor in inputs):
            output.requires_grad = True
            graph.record(function, inputs, output)
        return output


def forward_ops_catalog() -> frozenset:
    return frozenset(_CATALOG)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, x, y):
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeMismatchError(x.shape, y.shape, op) from None


class Add(Function):
    op_id = "add"

    def forward(self, x, y):
        _check_broadcast(self.op_id, x, y)
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Multiply(Function):
    op_id = "multiply"

    def forward(self, x, y):
        _check_broadcast(self.op_id, x, y)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            unbroadcast(grad * self.y, self.x.shape),
            unbroadcast(grad * self.x, self.y.shape),
        )


class MatMul(Function):
    op_id = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(a.shape, b.shape, self.op_id)
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Linear(Function):
    """Affine map over the last axis: ``x @ weight + bias``."""

    op_id = "linear"

    def forward(self, x, weight, bias):
        if x.shape[-1] != weight.shape[0]:
            raise ShapeMismatchError((weight.shape[0],), (x.shape[-1],), self.op_id)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatchError((weight.shape[1],), bias.shape, self.op_id)
        self.x, self.weight = x, weight
        return x @ weight + bias

    def backward(self, grad):
        flat_x = self.x.reshape(-1, self.x.shape[-1])
        flat_grad = grad.reshape(-1, grad.shape[-1])
        return grad @ self.weight.T, flat_x.T @ flat_grad, flat_grad.sum(axis=0)


class Conv1x1(Linear):
    """Pointwise convolution over the channel axis of a channels-last map."""

    op_id = "conv1x1"


class Conv3d(Function):
    """Strided 3-D convolution on ``(N, T, H, W, C)`` inputs.

    The kernel has shape ``(kt, kh, kw, C, O)`` and zero padding is applied
    symmetrically on the three spatiotemporal axes.
    """

    op_id = "conv3d"

    def __init__(self, stride=(1, 1, 1), padding=(1, 1, 1)):
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def forward(self, x, weight, bias):
        if x.ndim != 5 or weight.ndim != 5 or x.shape[-1] != weight.shape[3]:
            raise ShapeMismatchError(weight.shape, x.shape, self.op_id)
        pt, ph, pw = self.padding
        st, sh, sw = self.stride
        self.x_shape = x.shape
        padded = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
        self.padded_shape = padded.shape
        windows = sliding_window_view(padded, weight.shape[:3], axis=(1, 2, 3))
        self.windows = windows[:, ::st, ::sh, ::sw]
        self.weight = weight
        # windows: (N, T', H', W', C, kt, kh, kw)
        out = np.tensordot(self.windows, weight, axes=([4, 5, 6, 7], [3, 0, 1, 2]))
        return out + bias

    def backward(self, grad):
        kt, kh, kw = self.weight.shape[:3]
        st, sh, sw = self.stride
        pt, ph, pw = self.padding
        _, t_out, h_out, w_out, _ = grad.shape

        grad_weight = np.tensordot(self.windows, grad, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        grad_weight = grad_weight.transpose(1, 2, 3, 0, 4)
        grad_bias = grad.sum(axis=(0, 1, 2, 3))

        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    grad_padded[
                        :,
                        i:i + st * (t_out - 1) + 1:st,
                        j:j + sh * (h_out - 1) + 1:sh,
                        k:k + sw * (w_out - 1) + 1:sw,
                    ] += grad @ self.weight[i, j, k].T
        _, t, h, w, _ = self.x_shape
        grad_x = grad_padded[:, pt:pt + t, ph:ph + h, pw:pw + w]
        return grad_x, grad_weight, grad_bias


class BilinearSample(Function):
    """Sample a ``(H, W, C)`` map on per-box grids.

    `ys` and `xs` are ``(R, S)`` arrays of fractional row/column coordinates;
    the output is ``(R, S, S, C)``. Coordinates are clamped to the map.
    Gradients flow to the features only.
    """

    op_id = "bilinear_sample"

    def __init__(self, ys, xs):
        self.ys = np.asarray(ys)
        self.xs = np.asarray(xs)

    def _corners(self, coords, extent):
        coords = np.clip(coords, 0.0, extent - 1)
        low = np.floor(coords).astype(np.int64)
        high = np.minimum(low + 1, extent - 1)
        return low, high, coords - low

    def forward(self, features):
        height, width, _ = features.shape
        self.features_shape = features.shape
        y0, y1, wy = self._corners(self.ys, height)
        x0, x1, wx = self._corners(self.xs, width)
        wy = wy.astype(features.dtype)[:, :, None, None]
        wx = wx.astype(features.dtype)[:, None, :, None]
        self.rows = (y0[:, :, None], y1[:, :, None])
        self.cols = (x0[:, None, :], x1[:, None, :])
        self.weights = (
            (1 - wy) * (1 - wx), (1 - wy) * wx,
            wy * (1 - wx), wy * wx,
        )
        return (
            self.weights[0] * features[self.rows[0], self.cols[0]]
            + self.weights[1] * features[self.rows[0], self.cols[1]]
            + self.weights[2] * features[self.rows[1], self.cols[0]]
            + self.weights[3] * features[self.rows[1], self.cols[1]]
        )

    def backward(self, grad):
        grad_features = np.zeros(self.features_shape, dtype=grad.dtype)
        corners = (
            (self.rows[0], self.cols[0]), (self.rows[0], self.cols[1]),
            (self.rows[1], self.cols[0]), (self.rows[1], self.cols[1]),
        )
        for (rows, cols), weight in zip(corners, self.weights):
            np.add.at(grad_features, (rows, cols), grad * weight)
        return (grad_features,)


class MaxPool(Function):
    """Non-overlapping ``size x size`` max pool over the ``(H, W)`` axes of
    ``(..., H, W, C)``. Ties resolve to the first maximum.
    """

    op_id = "max_pool"

    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        s = self.size
        *lead, height, width, channels = x.shape
        if height % s or width % s:
            raise ShapeMismatchError((s, s), (height, width), self.op_id)
        lead = tuple(lead)
        n = len(lead)
        blocks = x.reshape(lead + (height // s, s, width // s, s, channels))
        blocks = np.moveaxis(blocks, (n + 1, n + 3), (-2, -1))
        self.block_shape = blocks.shape
        blocks = blocks.reshape(blocks.shape[:-2] + (s * s,))
        self.argmax = blocks.argmax(axis=-1)[..., None]
        self.x_shape = x.shape
        self.lead = n
        return np.take_along_axis(blocks, self.argmax, axis=-1)[..., 0]

    def backward(self, grad):
        s = self.size
        blocks = np.zeros(grad.shape + (s * s,), dtype=grad.dtype)
        np.put_along_axis(blocks, self.argmax, grad[..., None], axis=-1)
        blocks = blocks.reshape(self.block_shape)
        blocks = np.moveaxis(blocks, (-2, -1), (self.lead + 1, self.lead + 3))
        return (blocks.reshape(self.x_shape),)


class Mean(Function):
    op_id = "mean"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, x):
        self.x_shape = x.shape
        return np.mean(x, axis=self.axis)

    def backward(self, grad):
        axes = range(len(self.x_shape)) if self.axis is None else np.atleast_1d(self.axis)
        axes = tuple(a % len(self.x_shape) for a in axes)
        count = int(np.prod([self.x_shape[a] for a in axes]))
        expanded = np.expand_dims(grad, axes)
        return (np.broadcast_to(expanded, self.x_shape) / count,)


class Sum(Function):
    op_id = "sum"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, x):
        self.x_shape = x.shape
        return np.sum(x, axis=self.axis)

    def backward(self, grad):
        axes = range(len(self.x_shape)) if self.axis is None else np.atleast_1d(self.axis)
        axes = tuple(a % len(self.x_shape) for a in axes)
        expanded = np.expand_dims(grad, axes)
        return (np.broadcast_to(expanded, self.x_shape).copy(),)


class Concat(Function):
    op_id = "concat"

    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, *arrays):
        reference = list(arrays[0].shape)
        axis = self.axis % arrays[0].ndim
        for array in arrays[1:]:
            other = list(array.shape)
            if len(other) != len(reference) or \
                    other[:axis] + other[axis + 1:] != reference[:axis] + reference[axis + 1:]:
                raise ShapeMismatchError(arrays[0].shape, array.shape, self.op_id)
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class ReLU(Function):
    op_id = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    op_id = "sigmoid"

    def forward(self, x):
        self.out = np.exp(-np.logaddexp(0, -x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Softmax(Function):
    """Softmax over the last axis, computed with max subtraction."""

    op_id = "softmax"

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


class LayerNorm(Function):
    """Normalization over the last axis, without the affine part.

    The standard deviation is floored at `LAYER_NORM_EPSILON`, so vectors
    with any appreciable spread come out with exactly unit variance.
    """

    op_id = "layer_norm"

    def forward(self, x):
        centered = x - x.mean(axis=-1, keepdims=True)
        std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
        self.floored = std < LAYER_NORM_EPSILON
        self.scale = np.maximum(std, LAYER_NORM_EPSILON)
        self.out = centered / self.scale
        return self.out

    def backward(self, grad):
        grad_mean = grad.mean(axis=-1, keepdims=True)
        projection = (grad * self.out).mean(axis=-1, keepdims=True)
        projection = np.where(self.floored, 0, projection)
        return ((grad - grad_mean - self.out * projection) / self.scale,)


class Dropout(Function):
    """Inverted dropout.

    With a `key` the mask comes from a counter-based Philox stream seeded by
    that key and can be re-derived; without one it is drawn from fresh entropy
    and the recording graph is no longer deterministic.
    """

    op_id = "dropout"

    def __init__(self, rate=0.0, key=None, training=False):
        self.rate = rate
        self.key = key
        self.training = training
        self.mask = None
        self.deterministic = not (training and rate > 0 and key is None)

    def forward(self, x):
        if not self.training or self.rate == 0:
            return x
        if self.key is None:
            generator = np.random.default_rng()
        else:
            generator = np.random.Generator(
                np.random.Philox(np.random.SeedSequence(list(self.key)))
            )
        keep = generator.random(x.shape) >= self.rate
        self.mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self.mask

    def backward(self, grad):
        if self.mask is None:
            return (grad,)
        return (grad * self.mask,)


class Reshape(Function):
    op_id = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self.x_shape = x.shape
        try:
            return x.reshape(self.shape)
        except ValueError:
            raise ShapeMismatchError(self.shape, x.shape, self.op_id) from None

    def backward(self, grad):
        return (grad.reshape(self.x_shape),)


class Slice(Function):
    op_id = "slice"

    def __init__(self, index):
        self.index = index

    def forward(self, x):
        self.x_shape = x.shape
        self.dtype = x.dtype
        return x[self.index]

    def backward(self, grad):
        full = np.zeros(self.x_shape, dtype=self.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Transpose(Function):
    op_id = "transpose"

    def __init__(self, axes=None):
        self.axes = axes

    def forward(self, x):
        self.axes = tuple(self.axes) if self.axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


def add(x: Tensor, y: Tensor) -> Tensor:
    return Add.apply(x, y)


def multiply(x: Tensor, y: Tensor) -> Tensor:
    return Multiply.apply(x, y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Conv1x1.apply(x, weight, bias)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(1, 1, 1)):
    return Conv3d.apply(x, weight, bias, stride=stride, padding=padding)


def bilinear_sample(features: Tensor, ys, xs) -> Tensor:
    return BilinearSample.apply(features, ys=ys, xs=xs)


def max_pool(x: Tensor, size=2) -> Tensor:
    return MaxPool.apply(x, size=size)


def mean(x: Tensor, axis=None) -> Tensor:
    return Mean.apply(x, axis=axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return Sum.apply(x, axis=axis)


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def layer_norm(x: Tensor) -> Tensor:
    return LayerNorm.apply(x)


def dropout(x: Tensor, rate: float, key=None, training=False) -> Tensor:
    return Dropout.apply(x, rate=rate, key=key, training=training)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=shape)


def slice_(x: Tensor, index) -> Tensor:
    return Slice.apply(x, index=index)


def transpose(x: Tensor, axes=None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def backward(graph: OpGraph, loss: Tensor):
    """Reverse-mode accumulation from a scalar `loss` into the graph's leaves.

    Gradients are added to any existing `grad` of a leaf, so several graphs
    can accumulate into the same parameters. Leaves the loss does not depend on
    end up with a zero gradient.
    """
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.function.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grad if key not in grads else grads[key] + grad

    for leaf in graph.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        grad = grads.get(id(leaf))
        if grad is not None:
            leaf.grad = leaf.grad + grad.astype(leaf.dtype, copy=False)
    graph.logger.debug("backward over %d nodes, %d leaves", len(graph.nodes), len(graph.leaves))


@dataclass
class ParameterCheck:
    name: str
    max_relative_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    checks: List[ParameterCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[ParameterCheck]:
        return [check for check in self.checks if not check.passed]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    `loss_fn` rebuilds the forward pass from the current parameter values and
    returns the scalar loss. The error for a parameter is the largest absolute
    difference between the two gradients relative to the largest gradient
    magnitude of either. With `max_entries`, only a seeded random subset of
    each parameter's entries is perturbed.
    """
    graph = OpGraph()
    with graph:
        loss = loss_fn()
    live = graph.live_dropout_ops()
    if live:
        raise NonDeterministicGraphError(live)

    for tensor in params.values():
        tensor.grad = None
    backward(graph, loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, tensor in params.items():
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)
        analytic = np.zeros(tensor.size) if tensor.grad is None else tensor.grad.reshape(-1)
        flat = tensor.data.reshape(-1)
        indices = np.arange(tensor.size)
        if max_entries is not None and tensor.size > max_entries:
            indices = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))

        numeric = np.empty(len(indices))
        for position, index in enumerate(indices):
            original = flat[index]
            flat[index] = original + step
            plus = loss_fn().item()
            flat[index] = original - step
            minus = loss_fn().item()
            flat[index] = original
            numeric[position] = (plus - minus) / (2 * step)

        expected = analytic[indices]
        scale = max(np.abs(expected).max(initial=0), np.abs(numeric).max(initial=0), 1e-8)
        error = float(np.abs(expected - numeric).max(initial=0) / scale)
        report.checks.append(ParameterCheck(name, error, error < tolerance))
        logger.debug("grad_check %s: max relative error %.3e", name, error)
    return report
