import numpy as np
import pytest

from actiontx.backbone import (
    LocationEmbedding, LocationEmbeddingConfig, Trunk, append_embedding,
    normalized_coordinates, slice_center, trunk_output_shape,
)
from actiontx.errors import ConfigError, ShapeMismatchError
from actiontx.layers import MLP, Conv3d, Initializer
from actiontx.tensor import Tensor


@pytest.fixture
def init():
    return Initializer(seed=0, dtype="float64")


def random_clip(frames, height, width, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, size=(frames, height, width, 3)))


def test_full_size_trunk_shape_without_running_it():
    assert trunk_output_shape(64, 400, 400) == (16, 25, 25)


def test_longer_evaluation_clip_shape():
    assert trunk_output_shape(96, 400, 400) == (24, 25, 25)


@pytest.mark.parametrize("size", [(3, 64, 64), (8, 60, 64), (8, 64, 50), (0, 64, 64)])
def test_non_divisible_clips_are_rejected(size):
    with pytest.raises(ShapeMismatchError, match="trunk"):
        trunk_output_shape(*size)


def test_trunk_output_shape_on_toy_clip(init):
    trunk = Trunk(init, (4, 4, 8, 8))
    features = trunk(random_clip(8, 64, 64))
    assert features.shape == (2, 4, 4, 8)


def test_trunk_accepts_a_longer_clip_than_it_was_built_for(init):
    trunk = Trunk(init, (4, 4, 8, 8))
    assert trunk(random_clip(16, 64, 64)).shape == (4, 4, 4, 8)


def test_trunk_checks_shape_before_computing(init, mocker):
    trunk = Trunk(init, (4, 4, 8, 8))
    spy = mocker.spy(Conv3d, "__call__")
    with pytest.raises(ShapeMismatchError):
        trunk(random_clip(6, 64, 64))
    assert spy.call_count == 0


def test_trunk_needs_four_layers(init):
    with pytest.raises(ConfigError, match="four layers"):
        Trunk(init, (4, 4, 8))


def test_trunk_is_translation_covariant(init):
    trunk = Trunk(init, (4, 4, 4, 4))
    clip = random_clip(4, 128, 128, seed=3)
    shifted = Tensor(np.roll(clip.data, 16, axis=2))
    original, moved = trunk(clip).data, trunk(shifted).data
    np.testing.assert_allclose(moved[:, 1:7, 2:7], original[:, 1:7, 1:6], atol=1e-12)


@pytest.mark.parametrize("frames, index", [(1, 0), (2, 1), (16, 8)])
def test_slice_center_picks_the_middle_frame(frames, index):
    features = Tensor(np.arange(frames, dtype=np.float64).reshape(frames, 1, 1, 1))
    assert slice_center(features).data.item() == index


def test_coordinates_are_normalized_about_the_centre():
    np.testing.assert_array_equal(normalized_coordinates(3), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(normalized_coordinates(1), [0.0])
    assert normalized_coordinates(25)[12] == 0.0


def test_embedding_shape_and_channel_count(init):
    embedding = LocationEmbedding(init)
    assert embedding.channels == 16
    assert embedding(2, 4, 4).shape == (2, 4, 4, 16)


def test_embedding_depends_only_on_coordinates(init):
    embedding = LocationEmbedding(init)
    first = embedding(3, 5, 5).data
    np.testing.assert_array_equal(first, embedding(3, 5, 5).data)
    # spatial half is the same for every frame, temporal half the same for every cell
    np.testing.assert_array_equal(first[0, :, :, :8], first[2, :, :, :8])
    np.testing.assert_array_equal(first[1, 0, 0, 8:], first[1, 4, 3, 8:])
    assert not np.array_equal(first[0, 0, 0, 8:], first[2, 0, 0, 8:])


def test_embedding_inputs_are_centred(init, mocker):
    embedding = LocationEmbedding(init)
    spy = mocker.spy(MLP, "__call__")
    embedding(1, 3, 3)
    mlp, inputs = spy.call_args_list[0].args
    assert mlp is embedding.spatial
    inputs = inputs.data
    np.testing.assert_array_equal(inputs[1, 1], [0.0, 0.0])
    np.testing.assert_array_equal(inputs[0, 0], [-1.0, -1.0])
    np.testing.assert_array_equal(inputs[2, 2], [1.0, 1.0])


def test_embedding_config_validation():
    with pytest.raises(ConfigError, match="embedding_channels"):
        LocationEmbeddingConfig(channels=0)


def test_append_embedding_concatenates_channels(init):
    features = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 32)))
    embedding = LocationEmbedding(init)(2, 4, 4)
    combined = append_embedding(features, embedding)
    assert combined.shape == (2, 4, 4, 48)
    np.testing.assert_array_equal(combined.data[..., :32], features.data)
    np.testing.assert_array_equal(combined.data[..., 32:], embedding.data)


def test_append_embedding_rejects_mismatched_grids(init):
    features = Tensor(np.zeros((2, 4, 4, 8)))
    with pytest.raises(ShapeMismatchError):
        append_embedding(features, LocationEmbedding(init)(2, 4, 5))
