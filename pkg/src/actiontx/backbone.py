"""Convolutional trunk and the location embedding appended to its output.

Tensors are channels-last: a clip is ``(T, H, W, 3)`` and trunk features are
``(T', H', W', F)`` with ``T' = T / 4`` and ``H' = H / 16``, ``W' = W / 16``.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .layers import MLP, Conv3d, Initializer, Module
from .tensor import Tensor


TRUNK_STRIDES = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))
TEMPORAL_STRIDE = 4
SPATIAL_STRIDE = 16


def trunk_output_shape(frames: int, height: int, width: int) -> Tuple[int, int, int]:
    """Feature grid produced for a clip of the given size.

    Pure shape arithmetic, usable for sizes too large to run.
    """
    if frames % TEMPORAL_STRIDE or height % SPATIAL_STRIDE or width % SPATIAL_STRIDE \
            or min(frames, height, width) <= 0:
        raise ShapeMismatchError(
            (
                max(TEMPORAL_STRIDE, frames - frames % TEMPORAL_STRIDE),
                max(SPATIAL_STRIDE, height - height % SPATIAL_STRIDE),
                max(SPATIAL_STRIDE, width - width % SPATIAL_STRIDE),
            ),
            (frames, height, width),
            "trunk",
        )
    return frames // TEMPORAL_STRIDE, height // SPATIAL_STRIDE, width // SPATIAL_STRIDE


class Trunk(Module):
    """Four strided 3-D convolutions, each followed by a ReLU."""

    def __init__(self, init: Initializer, channels: Sequence[int] = (16, 16, 32, 32),
                 name="trunk"):
        if len(channels) != len(TRUNK_STRIDES):
            raise ConfigError("model.trunk_channels", "the trunk has exactly four layers")
        self.logger = logging.getLogger(self.__class__.__name__)
        self.layers = []
        in_channels = 3
        for index, (out_channels, stride) in enumerate(zip(channels, TRUNK_STRIDES)):
            self.layers.append(
                Conv3d(init, f"{name}.conv{index}", in_channels, out_channels, stride=stride)
            )
            in_channels = out_channels
        self.out_channels = in_channels

    def __call__(self, clip: Tensor) -> Tensor:
        frames, height, width, colors = clip.shape
        if colors != 3:
            raise ShapeMismatchError((frames, height, width, 3), clip.shape, "trunk")
        trunk_output_shape(frames, height, width)
        x = clip.reshape(1, frames, height, width, colors)
        for layer in self.layers:
            x = T.relu(layer(x))
        self.logger.debug("trunk %s -> %s", clip.shape, x.shape[1:])
        return x.reshape(x.shape[1:])


def slice_center(features: Tensor) -> Tensor:
    if features.ndim != 4 or features.shape[0] < 1:
        raise ShapeMismatchError((1,) + tuple(features.shape[1:]), features.shape, "slice_center")
    return features[features.shape[0] // 2]


def normalized_coordinates(extent: int) -> np.ndarray:
    """Cell coordinates scaled to ``[-1, 1]`` about the centre of the axis."""
    if extent == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, extent)


@dataclass(frozen=True)
class LocationEmbeddingConfig:
    spatial_hidden: int = 8
    temporal_hidden: int = 8
    channels: int = 8

    def __post_init__(self):
        if self.channels <= 0:
            raise ConfigError("model.embedding_channels", "must be positive")
        if self.spatial_hidden <= 0 or self.temporal_hidden <= 0:
            raise ConfigError("model.embedding_hidden", "must be positive")


class LocationEmbedding(Module):
    """Per-cell embedding of the ``(h, w)`` and ``t`` coordinates.

    Each coordinate vector goes through its own two-layer perceptron; the
    outputs are concatenated, spatial first, into ``2 * channels`` channels.
    """

    def __init__(self, init: Initializer, config=LocationEmbeddingConfig(), name="embedding"):
        self.config = config
        self.spatial = MLP(init, f"{name}.spatial", 2, config.spatial_hidden, config.channels)
        self.temporal = MLP(init, f"{name}.temporal", 1, config.temporal_hidden, config.channels)
        self.dtype = init.dtype

    @property
    def channels(self) -> int:
        return 2 * self.config.channels

    def __call__(self, frames: int, height: int, width: int) -> Tensor:
        if min(frames, height, width) <= 0:
            raise ShapeMismatchError((1, 1, 1), (frames, height, width), "location_embedding")
        rows, cols = np.meshgrid(
            normalized_coordinates(height), normalized_coordinates(width), indexing="ij"
        )
        spatial_in = Tensor(np.stack([rows, cols], axis=-1).astype(self.dtype))
        temporal_in = Tensor(normalized_coordinates(frames)[:, None].astype(self.dtype))
        c = self.config.channels

        spatial = self.spatial(spatial_in).reshape(1, height, width, c)
        temporal = self.temporal(temporal_in).reshape(frames, 1, 1, c)
        spatial = spatial + np.zeros((frames, 1, 1, c), dtype=self.dtype)
        temporal = temporal + np.zeros((1, height, width, c), dtype=self.dtype)
        return T.concat([spatial, temporal], axis=-1)


def append_embedding(features: Tensor, embedding: Tensor) -> Tensor:
    if features.ndim != 4 or embedding.ndim != 4 or features.shape[:3] != embedding.shape[:3]:
        raise ShapeMismatchError(features.shape[:3], embedding.shape[:3], "append_embedding")
    return T.concat([features, embedding], axis=-1)
