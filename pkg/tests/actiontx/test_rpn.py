import numpy as np
import pytest

from actiontx.geometry import decode_deltas_array, iou_matrix, make_anchors
from actiontx.layers import Initializer
from actiontx.rpn import (
    ProposalSet, RegionProposalNetwork, anchor_targets, select_proposals, sigmoid,
)
from actiontx.tensor import Tensor


@pytest.fixture
def rpn():
    return RegionProposalNetwork(Initializer(0, "float64"), in_channels=6, channels=8,
                                 num_anchors=3)


def test_rpn_output_counts(rpn):
    center = Tensor(np.random.default_rng(0).normal(size=(4, 4, 6)))
    logits, deltas = rpn(center)
    assert logits.shape == (48,)
    assert deltas.size == 192
    assert np.isfinite(logits.data).all()


def test_rpn_is_deterministic(rpn):
    center = Tensor(np.random.default_rng(1).normal(size=(4, 4, 6)))
    first, _ = rpn(center)
    second, _ = rpn(center)
    np.testing.assert_array_equal(first.data, second.data)


def test_rpn_gradient(rpn, gradcheck):
    center = Tensor(np.random.default_rng(2).normal(size=(2, 3, 6)))
    target = np.random.default_rng(3).normal(size=(18, 4))

    def loss():
        logits, deltas = rpn(center)
        return logits.sum() + (deltas * Tensor(target)).sum()

    gradcheck(loss, rpn.parameters())


def test_sigmoid_is_stable_for_large_logits():
    np.testing.assert_array_equal(sigmoid([-1000.0, 0.0, 1000.0]), [0.0, 0.5, 1.0])


def test_all_survivors_are_returned_when_fewer_than_requested():
    anchors = make_anchors(2, 2, 16, [8], [1.0])
    logits = np.array([0.1, 2.0, -1.0, 0.5])
    proposals = select_proposals(logits, np.zeros((4, 4)), anchors, 300, (32, 32))
    assert len(proposals) == 4
    assert (np.diff(proposals.scores) <= 0).all()
    np.testing.assert_array_equal(proposals.boxes[0], anchors[1])


def test_top_proposal_is_the_argmax_decoded_anchor():
    rng = np.random.default_rng(4)
    anchors = make_anchors(4, 4, 16, [12, 18, 26], [2.0])
    logits = rng.normal(size=len(anchors))
    deltas = rng.normal(scale=0.1, size=(len(anchors), 4))
    proposals = select_proposals(logits, deltas, anchors, 10, (64, 64))
    best = np.argmax(logits)
    expected = np.clip(decode_deltas_array(anchors[best], deltas[best]), 0, 64)
    np.testing.assert_allclose(proposals.boxes[0], expected[0])
    assert len(proposals) <= 10
    assert (np.diff(proposals.scores) <= 0).all()


def test_selected_proposals_do_not_overlap_above_threshold():
    rng = np.random.default_rng(5)
    anchors = make_anchors(4, 4, 16, [12, 18, 26], [2.0])
    proposals = select_proposals(rng.normal(size=48), np.zeros((48, 4)), anchors, 300, (64, 64))
    overlaps = iou_matrix(proposals.boxes, proposals.boxes)
    np.fill_diagonal(overlaps, 0)
    assert overlaps.max() < 0.7


def test_degenerate_proposals_are_dropped():
    anchors = np.array([[0, 0, 16, 16], [100, 100, 116, 116]], dtype=np.float64)
    proposals = select_proposals([1.0, 2.0], np.zeros((2, 4)), anchors, 10, (64, 64))
    np.testing.assert_array_equal(proposals.boxes, [[0, 0, 16, 16]])


def test_fixed_boxes_become_a_proposal_set():
    proposals = ProposalSet.from_boxes([[1, 2, 3, 4], [5, 6, 7, 8]])
    assert len(proposals) == 2
    np.testing.assert_array_equal(proposals.scores, [1.0, 1.0])


def test_anchor_targets_label_matching_anchors_positive():
    anchors = make_anchors(4, 4, 16, [16], [1.0])
    gt = anchors[[5]]
    targets = anchor_targets(anchors, gt, np.random.default_rng(0), negative_ratio=100)
    assert list(targets.positives) == [5]
    np.testing.assert_array_equal(targets.deltas[5], np.zeros(4))
    assert (targets.labels[targets.labels != 1] == 0).all()


def test_best_anchor_is_positive_even_below_threshold():
    anchors = make_anchors(4, 4, 16, [16], [1.0])
    gt = np.array([[20, 20, 30, 30]])
    targets = anchor_targets(anchors, gt, np.random.default_rng(0))
    best = int(iou_matrix(anchors, gt)[:, 0].argmax())
    assert list(targets.positives) == [best]


def test_negatives_are_subsampled_to_the_ratio():
    anchors = make_anchors(4, 4, 16, [12, 18, 26], [2.0])
    gt = np.array([[16, 16, 32, 48]])
    targets = anchor_targets(anchors, gt, np.random.default_rng(0), negative_ratio=3)
    positives = len(targets.positives)
    assert positives >= 1
    assert (targets.labels == 0).sum() == 3 * positives


def test_no_people_means_only_sampled_negatives():
    anchors = make_anchors(2, 2, 16, [16], [1.0])
    targets = anchor_targets(anchors, np.zeros((0, 4)), np.random.default_rng(0))
    assert len(targets.positives) == 0
    assert (targets.labels == 0).sum() == 3
