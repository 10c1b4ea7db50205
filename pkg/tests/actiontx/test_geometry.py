import math

import numpy as np
import pytest

from actiontx.errors import GeometryError
from actiontx.geometry import (
    Box, clip_boxes, decode_deltas, decode_deltas_array, encode_deltas, encode_deltas_array,
    iou, iou_matrix, make_anchors, nms,
)


def random_boxes(rng, count, size=64.0):
    corners = rng.uniform(0, size, size=(count, 2))
    extents = rng.uniform(1, size / 2, size=(count, 2))
    return np.concatenate([corners, corners + extents], axis=1)


def brute_force_nms(boxes, scores, threshold):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        a = Box.from_array(boxes[i])
        if all(iou(a, Box.from_array(boxes[j])) < threshold for j in kept):
            kept.append(i)
    return kept


def test_box_rejects_inverted_corners():
    with pytest.raises(GeometryError, match="out of order"):
        Box(5, 0, 1, 1)
    with pytest.raises(GeometryError, match="non-finite"):
        Box(0, 0, math.inf, 1)


def test_iou_of_a_box_with_itself():
    box = Box(3, 4, 10, 20)
    assert iou(box, box) == 1.0


def test_iou_of_disjoint_boxes():
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0


def test_iou_of_overlapping_squares():
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_of_degenerate_boxes_is_zero():
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


def test_iou_is_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 50), random_boxes(rng, 40)
    forward, reverse = iou_matrix(a, b), iou_matrix(b, a)
    np.testing.assert_array_equal(forward, reverse.T)
    assert (forward >= 0).all() and (forward <= 1).all()


def test_deltas_of_identical_boxes_are_zero():
    box = Box(2, 3, 12, 9)
    np.testing.assert_array_equal(encode_deltas(box, box), np.zeros(4))


def test_doubling_the_width_gives_log_two():
    deltas = encode_deltas(Box(0, 0, 10, 10), Box(0, 0, 20, 10))
    assert deltas[2] == pytest.approx(math.log(2))
    assert deltas[0] == pytest.approx(0.5)
    assert deltas[3] == 0.0


def test_deltas_round_trip_on_random_pairs():
    rng = np.random.default_rng(1)
    anchors, targets = random_boxes(rng, 1000), random_boxes(rng, 1000)
    decoded = decode_deltas_array(anchors, encode_deltas_array(anchors, targets))
    assert np.abs(decoded - targets).max() < 1e-6


def test_single_box_decode_matches_target():
    anchor, target = Box(0, 0, 10, 10), Box(1, 2, 8, 13)
    decoded = decode_deltas(anchor, encode_deltas(anchor, target))
    np.testing.assert_allclose(decoded.as_array(), target.as_array(), atol=1e-9)


def test_zero_width_anchor_is_rejected():
    with pytest.raises(GeometryError, match="zero-width"):
        encode_deltas(Box(1, 1, 1, 5), Box(0, 0, 2, 2))


def test_decoding_huge_scale_deltas_stays_finite():
    decoded = decode_deltas_array(np.array([[0, 0, 16, 16]]), np.array([[0, 0, 1e6, 1e6]]))
    assert np.isfinite(decoded).all()


def test_clip_boxes_to_the_image():
    clipped = clip_boxes(np.array([[-5, -1, 70, 30]]), 64, 64)
    np.testing.assert_array_equal(clipped, [[0, 0, 64, 30]])


def test_nms_keeps_a_single_detection():
    assert nms(np.array([[0, 0, 4, 4]]), np.array([0.3]), 0.5) == [0]


def test_nms_keeps_only_the_higher_scored_duplicate():
    boxes = np.array([[0, 0, 4, 4], [0, 0, 4, 4]])
    assert nms(boxes, np.array([0.9, 0.8]), 0.5) == [0]
    assert nms(boxes, np.array([0.8, 0.9]), 0.5) == [1]


def test_nms_breaks_ties_by_lower_index():
    boxes = np.array([[0, 0, 4, 4], [0, 0, 4, 4], [10, 10, 14, 14]])
    assert nms(boxes, np.array([0.5, 0.5, 0.5]), 0.5) == [0, 2]


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 200)
    scores = rng.uniform(size=200).round(2)
    assert nms(boxes, scores, 0.5) == brute_force_nms(boxes, scores, 0.5)


def test_single_anchor_is_centred_on_the_cell():
    anchors = make_anchors(1, 1, 16, [8], [1.0])
    np.testing.assert_array_equal(anchors, [[4, 4, 12, 12]])


def test_anchor_count_is_cells_times_shapes():
    assert make_anchors(4, 4, 16, [12, 18], [2.0]).shape == (32, 4)


def test_anchor_ratio_is_height_over_width():
    anchor = make_anchors(1, 1, 16, [16], [4.0])[0]
    width, height = anchor[2] - anchor[0], anchor[3] - anchor[1]
    assert height / width == pytest.approx(4.0)
    assert width * height == pytest.approx(256.0)


def test_anchors_of_one_shape_are_translations():
    anchors = make_anchors(3, 5, 16, [12, 18, 26], [2.0]).reshape(3, 5, 3, 4)
    for shape in range(3):
        same = anchors[:, :, shape].reshape(-1, 4)
        sizes = same[:, 2:] - same[:, :2]
        np.testing.assert_allclose(sizes, sizes[0:1].repeat(len(sizes), axis=0))
        offsets = same[:, :2] - same[0, :2]
        assert np.allclose(offsets % 16, 0)
