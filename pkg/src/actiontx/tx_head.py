"""The attention head.

A proposal's pooled centre-frame feature becomes a query (the query
preprocessor, "QPr"), which then attends over every cell of the clip's
feature map. Each layer runs several independent heads, concatenates their
outputs and maps them back to the model width to form the next query.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .layers import MLP, Conv1x1, Dropout, Initializer, LayerNorm, Linear, Module, RunContext
from .layers import EVAL
from .pooling import POOLED_SIZE
from .tensor import Tensor


@dataclass(frozen=True)
class TxConfig:
    d_model: int = 128
    value_dim: int = 128
    heads: int = 2
    layers: int = 3
    dropout: float = 0.3
    ffn_hidden: int = 256
    qpr: str = "highres"
    qpr_channels: int = 32

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("model.heads", "must be at least 1")
        if self.layers < 1:
            raise ConfigError("model.layers", "must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout", "must be in [0, 1)")
        if self.value_dim != self.d_model:
            raise ConfigError("model.d_model", "values are added to the query, widths must match")
        if self.qpr not in ("highres", "lowres"):
            raise ConfigError("model.qpr", "must be highres or lowres")


@dataclass
class AttentionTrace:
    """Softmax weights of every (layer, head), each ``(R, T', H', W')``."""

    weights: List[List[np.ndarray]]

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def heads(self) -> int:
        return len(self.weights[0]) if self.weights else 0

    def map(self, layer: int, head: int) -> np.ndarray:
        return self.weights[layer][head]

    def head_average(self, layer: int = -1) -> np.ndarray:
        return np.mean(self.weights[layer], axis=0)

    def select(self, indices) -> "AttentionTrace":
        return AttentionTrace([[w[indices] for w in layer] for layer in self.weights])


class HighResQPr(Module):
    """1x1 convolution down to a few channels, flatten all 7x7 cells, project."""

    def __init__(self, init: Initializer, name, features, channels, d_model):
        self.reduce = Conv1x1(init, f"{name}.reduce", features, channels)
        self.project = Linear(
            init, f"{name}.project", POOLED_SIZE * POOLED_SIZE * channels, d_model
        )

    def __call__(self, roi: Tensor) -> Tensor:
        reduced = self.reduce(roi)
        flat = reduced.reshape(roi.shape[0], -1)
        return self.project(flat)


class LowResQPr(Module):
    """Spatial average of the RoI feature, then a projection."""

    def __init__(self, init: Initializer, name, features, d_model):
        self.project = Linear(init, f"{name}.project", features, d_model)

    def __call__(self, roi: Tensor) -> Tensor:
        return self.project(T.mean(roi, axis=(1, 2)))


class TxUnit(Module):
    """One attention head.

    ``Q' = LayerNorm(Q + Dropout(A))`` and
    ``Q'' = LayerNorm(Q' + Dropout(FFN(Q')))``, where ``A`` is the
    softmax-weighted sum of the values over all memory cells.
    """

    def __init__(self, init: Initializer, name, features, config: TxConfig):
        d = config.d_model
        self.scale = 1.0 / math.sqrt(d)
        self.query = Linear(init, f"{name}.query", d, d)
        self.key = Linear(init, f"{name}.key", features, d)
        self.value = Linear(init, f"{name}.value", features, config.value_dim)
        self.attention_dropout = Dropout(f"{name}.attention_dropout", config.dropout)
        self.attention_norm = LayerNorm(init, f"{name}.attention_norm", d)
        self.ffn = MLP(init, f"{name}.ffn", d, config.ffn_hidden, d)
        self.ffn_dropout = Dropout(f"{name}.ffn_dropout", config.dropout)
        self.ffn_norm = LayerNorm(init, f"{name}.ffn_norm", d)

    def keys(self, memory: Tensor) -> Tensor:
        return self.key(memory.reshape(-1, memory.shape[-1]))

    def attention_logits(self, query: Tensor, memory: Tensor) -> Tensor:
        keys = self.keys(memory)
        return T.matmul(self.query(query), keys.transpose()) * self.scale

    def __call__(self, query: Tensor, memory: Tensor, ctx: RunContext = EVAL):
        if query.ndim != 2 or memory.ndim != 4:
            raise ShapeMismatchError((query.shape[0], self.query.weight.shape[0]),
                                     query.shape, "tx_unit")
        weights = T.softmax(self.attention_logits(query, memory))
        values = self.value(memory.reshape(-1, memory.shape[-1]))
        attended = T.matmul(weights, values)
        updated = self.attention_norm(query + self.attention_dropout(attended, ctx))
        updated = self.ffn_norm(updated + self.ffn_dropout(self.ffn(updated), ctx))
        trace = weights.data.reshape((query.shape[0],) + memory.shape[:3])
        return updated, trace


class TxLayer(Module):

    def __init__(self, init: Initializer, name, features, config: TxConfig):
        self.heads = [
            TxUnit(init, f"{name}.head{index}", features, config)
            for index in range(config.heads)
        ]
        self.combine = Linear(
            init, f"{name}.combine", config.heads * config.d_model, config.d_model
        )

    def __call__(self, query: Tensor, memory: Tensor, ctx: RunContext = EVAL):
        outputs, maps = [], []
        for head in self.heads:
            output, weights = head(query, memory, ctx)
            outputs.append(output)
            maps.append(weights)
        joined = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=-1)
        return self.combine(joined), maps


class TxStack(Module):

    def __init__(self, init: Initializer, features, config: TxConfig, name="tx"):
        self.layers = [
            TxLayer(init, f"{name}.layer{index}", features, config)
            for index in range(config.layers)
        ]

    def __call__(self, query: Tensor, memory: Tensor, ctx: RunContext = EVAL):
        maps = []
        for layer in self.layers:
            query, layer_maps = layer(query, memory, ctx)
            maps.append(layer_maps)
        return query, AttentionTrace(maps)


@dataclass
class HeadOutput:
    """``(R, C + 1)`` logits, background last, and ``(R, 4)`` or ``(R, 4C)`` deltas."""

    logits: Tensor
    deltas: Tensor

    @property
    def class_agnostic(self) -> bool:
        return self.deltas.shape[-1] == 4


class HeadOutputs(Module):
    """Classification and regression layers shared by both head types."""

    def __init__(self, init: Initializer, name, in_features, num_classes,
                 class_agnostic=True):
        self.classifier = Linear(init, f"{name}.classifier", in_features, num_classes + 1)
        self.regressor = Linear(
            init, f"{name}.regressor", in_features, 4 if class_agnostic else 4 * num_classes
        )

    def __call__(self, feature: Tensor) -> HeadOutput:
        return HeadOutput(self.classifier(feature), self.regressor(feature))


def combine_head_outputs(classification: HeadOutput, regression: HeadOutput) -> HeadOutput:
    return HeadOutput(classification.logits, regression.deltas)


class TxHead(Module):

    def __init__(self, init: Initializer, features, num_classes, config: TxConfig,
                 class_agnostic=True, name="tx_head"):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        if config.qpr == "highres":
            self.qpr = HighResQPr(init, f"{name}.qpr", features, config.qpr_channels,
                                  config.d_model)
        else:
            self.qpr = LowResQPr(init, f"{name}.qpr", features, config.d_model)
        self.stack = TxStack(init, features, config, name=f"{name}.stack")
        self.outputs = HeadOutputs(init, f"{name}.outputs", config.d_model, num_classes,
                                   class_agnostic)

    def __call__(self, roi: Tensor, memory: Tensor, ctx: RunContext = EVAL
                 ) -> Tuple[HeadOutput, Optional[AttentionTrace]]:
        query = self.qpr(roi)
        feature, trace = self.stack(query, memory, ctx)
        self.logger.debug("%d queries over %s memory", roi.shape[0], memory.shape[:3])
        return self.outputs(feature), trace
