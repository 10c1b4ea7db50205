import numpy as np
import pytest

from actiontx.errors import PoolingError
from actiontx.geometry import Box
from actiontx.pooling import roipool, sampling_grid, st_roipool
from actiontx.tensor import Tensor


def test_constant_map_pools_to_the_constant():
    features = Tensor(np.full((4, 4, 3), 2.5))
    pooled = roipool(features, Box(5, 7, 40, 61))
    assert pooled.shape == (7, 7, 3)
    np.testing.assert_allclose(pooled.data, 2.5)


def test_full_box_on_a_column_ramp_is_monotone():
    ramp = np.tile(np.arange(4, dtype=np.float64)[None, :, None], (4, 1, 1))
    pooled = roipool(Tensor(ramp), Box(0, 0, 64, 64)).data[..., 0]
    np.testing.assert_array_equal(pooled, np.tile(pooled[0:1], (7, 1)))
    assert (np.diff(pooled[0]) >= 0).all()
    assert pooled[0, -1] > pooled[0, 0]


def test_batch_of_boxes_gives_one_grid_each():
    features = Tensor(np.random.default_rng(0).normal(size=(4, 4, 5)))
    boxes = np.array([[0, 0, 32, 32], [16, 8, 64, 60], [1, 1, 9, 9]])
    assert roipool(features, boxes).shape == (3, 7, 7, 5)


def test_boxes_outside_the_image_are_clipped():
    features = Tensor(np.random.default_rng(1).normal(size=(4, 4, 2)))
    inside = roipool(features, Box(0, 0, 64, 64)).data
    spilling = roipool(features, Box(-30, -10, 90, 80)).data
    np.testing.assert_array_equal(inside, spilling)


@pytest.mark.parametrize("box", [Box(10, 10, 10, 30), Box(70, 70, 90, 90)])
def test_zero_area_boxes_are_rejected(box):
    with pytest.raises(PoolingError):
        roipool(Tensor(np.zeros((4, 4, 1))), box)


def test_sampling_grid_is_in_feature_coordinates():
    ys, xs = sampling_grid(np.array([[8, 8, 24, 24]]), 16, 4, 4)
    assert ys.shape == xs.shape == (1, 14)
    assert xs[0, 0] == pytest.approx(0.0 + 0.5 / 14)
    assert xs[0, -1] == pytest.approx(1.0 - 0.5 / 14)


def test_st_roipool_slices_equal_per_frame_roipool():
    features = Tensor(np.random.default_rng(2).normal(size=(3, 4, 4, 6)))
    boxes = np.array([[4, 4, 50, 40], [20, 0, 64, 64]])
    tube = st_roipool(features, boxes).data
    assert tube.shape == (2, 3, 7, 7, 6)
    for t in range(3):
        np.testing.assert_allclose(tube[:, t], roipool(features[t], boxes).data, atol=1e-12)


def test_st_roipool_of_a_single_frame_is_roipool():
    features = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4, 2)))
    box = Box(3, 3, 33, 47)
    np.testing.assert_allclose(
        st_roipool(features, box).data[0], roipool(features[0], box).data, atol=1e-12
    )


def test_temporally_constant_features_give_identical_slices():
    frame = np.random.default_rng(4).normal(size=(4, 4, 3))
    features = Tensor(np.stack([frame] * 4))
    tube = st_roipool(features, Box(0, 0, 40, 40)).data
    assert tube.shape == (4, 7, 7, 3)
    for t in range(1, 4):
        np.testing.assert_array_equal(tube[t], tube[0])


def test_pooling_gradient(gradcheck):
    features = Tensor(np.random.default_rng(5).normal(size=(2, 4, 4, 3)), requires_grad=True)
    weights = Tensor(np.random.default_rng(6).normal(size=(2, 2, 7, 7, 3)))
    boxes = np.array([[3, 5, 41, 60], [10, 2, 30, 20]])
    gradcheck(lambda: (st_roipool(features, boxes) * weights).sum(), {"features": features})
