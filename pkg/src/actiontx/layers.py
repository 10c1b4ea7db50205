import zlib
from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


def name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RunContext:
    """What a forward pass needs to know beyond its inputs.

    Dropout masks are keyed by ``(seed, step, sample, layer)``, so a training
    step is reproducible and its masks can be re-derived at any time.
    """

    training: bool = False
    seed: int = 0
    step: int = 0
    sample: int = 0

    def dropout_key(self, layer_name: str):
        if not self.training:
            return None
        return (self.seed, self.step, self.sample, name_key(layer_name))


EVAL = RunContext()


class Initializer:
    """Creates named parameters.

    Each parameter draws from its own generator seeded by the model seed and
    the parameter name, so values do not depend on construction order.
    """

    def __init__(self, seed: int = 0, dtype="float32"):
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def _generator(self, name):
        sequence = np.random.SeedSequence([self.seed, name_key(name)])
        return np.random.Generator(np.random.Philox(sequence))

    def fan_in_uniform(self, name, shape, fan_in) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        values = self._generator(name).uniform(-bound, bound, size=shape)
        return Tensor(values.astype(self.dtype), requires_grad=True, name=name)

    def constant(self, name, shape, value) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)


class Module:

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())


class Linear(Module):

    def __init__(self, init: Initializer, name: str, in_features: int, out_features: int):
        self.name = name
        self.weight = init.fan_in_uniform(
            f"{name}.weight", (in_features, out_features), in_features
        )
        self.bias = init.constant(f"{name}.bias", (out_features,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv1x1(Linear):

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class Conv3d(Module):

    def __init__(
        self, init: Initializer, name: str, in_channels: int, out_channels: int,
        kernel=(3, 3, 3), stride=(1, 1, 1),
    ):
        self.name = name
        self.stride = tuple(stride)
        self.padding = tuple(k // 2 for k in kernel)
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = init.fan_in_uniform(
            f"{name}.weight", tuple(kernel) + (in_channels, out_channels), fan_in
        )
        self.bias = init.constant(f"{name}.bias", (out_channels,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):

    def __init__(self, init: Initializer, name: str, features: int):
        self.gain = init.constant(f"{name}.gain", (features,), 1.0)
        self.bias = init.constant(f"{name}.bias", (features,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gain + self.bias


class Dropout(Module):

    def __init__(self, name: str, rate: float):
        self.name = name
        self.rate = rate

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        return T.dropout(x, self.rate, key=ctx.dropout_key(self.name), training=ctx.training)


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, init: Initializer, name: str, in_features, hidden, out_features):
        self.first = Linear(init, f"{name}.0", in_features, hidden)
        self.second = Linear(init, f"{name}.1", hidden, out_features)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(T.relu(self.first(x)))


def zero_grads(params: Dict[str, Tensor]):
    for tensor in params.values():
        tensor.zero_grad()

