import math

import numpy as np
import pytest

from actiontx.errors import ConfigError, ShapeMismatchError
from actiontx.layers import Initializer, RunContext
from actiontx.losses import classification_loss, regression_loss
from actiontx.tensor import Tensor
from actiontx.tx_head import (
    AttentionTrace, HeadOutput, HighResQPr, LowResQPr, TxConfig, TxHead, TxStack, TxUnit,
    combine_head_outputs,
)


FEATURES = 6
TINY = TxConfig(d_model=8, value_dim=8, heads=2, layers=2, dropout=0.3, ffn_hidden=8,
                qpr_channels=2)


@pytest.fixture
def init():
    return Initializer(seed=0, dtype="float64")


def memory(seed, frames=2, height=3, width=3, features=FEATURES):
    return Tensor(np.random.default_rng(seed).normal(size=(frames, height, width, features)))


def queries(seed, count=4, width=8):
    return Tensor(np.random.default_rng(seed).normal(size=(count, width)))


def rois(seed, count=3, size=7):
    return Tensor(np.random.default_rng(seed).normal(size=(count, size, size, FEATURES)))


def test_config_validation():
    with pytest.raises(ConfigError, match="model.heads"):
        TxConfig(heads=0)
    with pytest.raises(ConfigError, match="model.layers"):
        TxConfig(layers=0)
    with pytest.raises(ConfigError, match="model.dropout"):
        TxConfig(dropout=1.0)
    with pytest.raises(ConfigError, match="model.qpr"):
        TxConfig(qpr="medium")


def test_default_config_widths():
    config = TxConfig()
    assert (config.d_model, config.value_dim, config.heads, config.layers) == (128, 128, 2, 3)
    assert config.dropout == 0.3


def test_attention_weights_are_distributions(init):
    unit = TxUnit(init, "unit", FEATURES, TINY)
    for seed in range(1000):
        _, weights = unit(queries(seed, count=5), memory(seed + 1000))
        flat = weights.reshape(5, -1)
        assert (flat >= 0).all()
        assert np.abs(flat.sum(axis=1) - 1).max() < 1e-6


def test_identical_keys_give_uniform_attention(init):
    unit = TxUnit(init, "unit", FEATURES, TINY)
    cell = np.random.default_rng(0).normal(size=FEATURES)
    flat = Tensor(np.tile(cell, (2, 3, 3, 1)))
    _, weights = unit(queries(1), flat)
    np.testing.assert_allclose(weights, 1 / 18, atol=1e-15)


def test_single_memory_cell_gets_all_attention(init):
    unit = TxUnit(init, "unit", FEATURES, TINY)
    _, weights = unit(queries(2), memory(3, 1, 1, 1))
    np.testing.assert_array_equal(weights.reshape(-1), np.ones(4))


def test_logits_are_scaled_dot_products(init):
    config = TxConfig(heads=1, layers=1, ffn_hidden=16, qpr_channels=2)
    unit = TxUnit(init, "unit", FEATURES, config)
    q, mem = queries(4, width=128), memory(5)
    logits = unit.attention_logits(q, mem).data
    projected = q.data @ unit.query.weight.data + unit.query.bias.data
    keys = mem.data.reshape(-1, FEATURES) @ unit.key.weight.data + unit.key.bias.data
    np.testing.assert_allclose(logits, projected @ keys.T / math.sqrt(128), atol=1e-12)


def test_attention_is_invariant_to_a_logit_shift(init, mocker):
    unit = TxUnit(init, "unit", FEATURES, TINY)
    q, mem = queries(6), memory(7)
    before, _ = unit(q, mem)
    original = TxUnit.attention_logits
    mocker.patch.object(TxUnit, "attention_logits",
                        lambda self, query, mem: original(self, query, mem) + 37.5)
    after, _ = unit(q, mem)
    np.testing.assert_allclose(after.data, before.data, atol=1e-12)


def test_permuting_memory_cells_leaves_the_feature_unchanged(init):
    stack = TxStack(init, FEATURES, TINY)
    q, mem = queries(8), memory(9)
    order = np.random.default_rng(10).permutation(18)
    shuffled = Tensor(mem.data.reshape(18, FEATURES)[order].reshape(mem.shape))
    before, trace = stack(q, mem)
    after, shuffled_trace = stack(q, shuffled)
    np.testing.assert_allclose(after.data, before.data, atol=1e-12)
    np.testing.assert_allclose(
        shuffled_trace.map(1, 0).reshape(4, 18), trace.map(1, 0).reshape(4, 18)[:, order],
        atol=1e-12,
    )


def test_unit_rejects_a_flat_memory(init):
    unit = TxUnit(init, "unit", FEATURES, TINY)
    with pytest.raises(ShapeMismatchError, match="tx_unit"):
        unit(queries(0), Tensor(np.zeros((18, FEATURES))))


def test_one_head_one_layer_is_a_unit_and_the_output_map(init):
    config = TxConfig(d_model=8, value_dim=8, heads=1, layers=1, ffn_hidden=8)
    stack = TxStack(init, FEATURES, config)
    q, mem = queries(11), memory(12)
    feature, trace = stack(q, mem)
    layer = stack.layers[0]
    unit_output, weights = layer.heads[0](q, mem)
    np.testing.assert_array_equal(feature.data, layer.combine(unit_output).data)
    np.testing.assert_array_equal(trace.map(0, 0), weights)


def test_trace_has_one_map_per_layer_and_head(init):
    config = TxConfig(d_model=8, value_dim=8, heads=2, layers=3, ffn_hidden=8, qpr_channels=2)
    head = TxHead(init, FEATURES, 3, config)
    _, trace = head(rois(13), memory(14))
    assert (trace.layers, trace.heads) == (3, 2)
    assert sum(len(layer) for layer in trace.weights) == 6
    assert trace.map(2, 1).shape == (3, 2, 3, 3)
    np.testing.assert_allclose(trace.head_average().sum(axis=(1, 2, 3)), 1.0)


def test_trace_selection_keeps_chosen_proposals():
    weights = [[np.arange(8.0).reshape(4, 1, 1, 2)]]
    selected = AttentionTrace(weights).select(np.array([2, 0]))
    np.testing.assert_array_equal(selected.map(0, 0)[:, 0, 0, 0], [4.0, 0.0])


def test_highres_query_preserves_layout(init):
    qpr = HighResQPr(init, "qpr", FEATURES, 2, 8)
    roi = rois(15, count=1)
    flipped = Tensor(roi.data[:, ::-1].copy())
    assert qpr(roi).shape == (1, 8)
    assert not np.allclose(qpr(roi).data, qpr(flipped).data)


def test_highres_query_of_a_zero_roi_depends_only_on_biases(init):
    qpr = HighResQPr(init, "qpr", FEATURES, 2, 8)
    query = qpr(Tensor(np.zeros((1, 7, 7, FEATURES)))).data
    expected = np.tile(qpr.reduce.bias.data, 49) @ qpr.project.weight.data + qpr.project.bias.data
    np.testing.assert_allclose(query[0], expected, atol=1e-12)


def test_lowres_query_ignores_layout(init):
    qpr = LowResQPr(init, "qpr", FEATURES, 8)
    roi = rois(16, count=2)
    order = np.random.default_rng(17).permutation(49)
    shuffled = Tensor(roi.data.reshape(2, 49, FEATURES)[:, order].reshape(roi.shape))
    np.testing.assert_allclose(qpr(shuffled).data, qpr(roi).data, atol=1e-12)


def test_lowres_query_of_constant_roi_matches_a_single_cell(init):
    qpr = LowResQPr(init, "qpr", FEATURES, 8)
    value = np.random.default_rng(18).normal(size=FEATURES)
    full = qpr(Tensor(np.tile(value, (1, 7, 7, 1)))).data
    single = qpr(Tensor(value.reshape(1, 1, 1, FEATURES))).data
    np.testing.assert_allclose(full, single, atol=1e-12)
    zero = qpr(Tensor(np.zeros((1, 7, 7, FEATURES)))).data
    np.testing.assert_array_equal(zero[0], qpr.project.bias.data)


def test_head_output_arity(init):
    config = TxConfig(d_model=8, value_dim=8, heads=1, layers=1, ffn_hidden=8, qpr_channels=2)
    agnostic, _ = TxHead(init, FEATURES, 10, config)(rois(19), memory(20))
    assert agnostic.logits.shape == (3, 11)
    assert agnostic.deltas.shape == (3, 4)
    assert agnostic.class_agnostic
    assert np.isfinite(agnostic.logits.data).all()
    specific, _ = TxHead(init, FEATURES, 10, config, class_agnostic=False)(rois(19), memory(20))
    assert specific.deltas.shape == (3, 40)
    assert not specific.class_agnostic


def test_combined_outputs_route_scores_and_boxes():
    tx = HeadOutput(Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 4))))
    i3d = HeadOutput(Tensor(np.zeros((2, 4))), Tensor(np.full((2, 4), 3.0)))
    combined = combine_head_outputs(tx, i3d)
    assert combined.logits is tx.logits
    assert combined.deltas is i3d.deltas


def test_eval_mode_is_deterministic(init):
    head = TxHead(init, FEATURES, 3, TINY)
    first, _ = head(rois(21), memory(22))
    second, _ = head(rois(21), memory(22))
    np.testing.assert_array_equal(first.logits.data, second.logits.data)
    np.testing.assert_array_equal(first.deltas.data, second.deltas.data)


def test_training_mode_applies_keyed_dropout(init):
    head = TxHead(init, FEATURES, 3, TINY)
    ctx = RunContext(training=True, seed=1, step=2, sample=0)
    eval_output, _ = head(rois(23), memory(24))
    first, _ = head(rois(23), memory(24), ctx)
    second, _ = head(rois(23), memory(24), ctx)
    np.testing.assert_array_equal(first.logits.data, second.logits.data)
    assert not np.allclose(first.logits.data, eval_output.logits.data)


@pytest.mark.parametrize("qpr", ["highres", "lowres"])
def test_full_head_gradient(init, gradcheck, qpr):
    config = TxConfig(d_model=8, value_dim=8, heads=2, layers=2, dropout=0.3, ffn_hidden=8,
                      qpr=qpr, qpr_channels=2)
    head = TxHead(init, FEATURES, 3, config)
    roi = rois(25, count=2)
    mem = memory(26)
    targets = np.array([[1, 0, 1, 0], [0, 0, 0, 1]], dtype=np.float64)
    boxes = np.random.default_rng(27).normal(size=(2, 4))
    ctx = RunContext(training=True, seed=3, step=1)

    def loss():
        output, _ = head(roi, mem, ctx)
        return classification_loss(output.logits, targets) + regression_loss(output.deltas, boxes)

    gradcheck(loss, head.parameters(), max_entries=24)
