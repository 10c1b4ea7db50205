import io

import numpy as np
import pytest

from actiontx.checkpoint import (
    MAGIC, load_checkpoint, read_checkpoint, restore_checkpoint, save_checkpoint,
    write_checkpoint,
)
from actiontx.errors import (
    BadMagicError, CheckpointConfigMismatch, CheckpointError, TruncatedRecordError,
)
from actiontx.tensor import Tensor


HASH = "a" * 64


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return {
        "trunk.conv0.weight": Tensor(rng.normal(size=(3, 3, 3, 2, 4)), requires_grad=True),
        "rpn.objectness.bias": Tensor(rng.normal(size=3).astype(np.float32),
                                      requires_grad=True),
    }


@pytest.fixture
def momentum(params):
    return {name: np.full(t.shape, 0.5, dtype=t.dtype) for name, t in params.items()}


def encoded(params, momentum, step=7, config_hash=HASH) -> bytes:
    stream = io.BytesIO()
    write_checkpoint(stream, params, momentum, step, config_hash)
    return stream.getvalue()


def test_round_trip(tmp_path, params, momentum):
    save_checkpoint(tmp_path / "runs" / "final.ckpt", params, momentum, 7, HASH)
    checkpoint = load_checkpoint(tmp_path / "runs" / "final.ckpt", HASH)
    assert checkpoint.step == 7
    assert checkpoint.config_hash == HASH
    assert set(checkpoint.params) == set(params)
    for name, tensor in params.items():
        assert checkpoint.params[name].dtype == tensor.dtype
        np.testing.assert_array_equal(checkpoint.params[name], tensor.data)
        np.testing.assert_array_equal(checkpoint.momentum[name], momentum[name])
    assert not list(tmp_path.glob("runs/*.partial"))


def test_file_starts_with_the_magic(params, momentum):
    assert encoded(params, momentum).startswith(MAGIC)


def test_config_mismatch_is_reported(params, momentum):
    stream = io.BytesIO(encoded(params, momentum))
    with pytest.raises(CheckpointConfigMismatch) as raised:
        read_checkpoint(stream, "b" * 64)
    assert f"actual_hash={HASH}" in str(raised.value)


def test_any_hash_is_accepted_without_expectation(params, momentum):
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, momentum, config_hash="c" * 64)))
    assert checkpoint.config_hash == "c" * 64


def test_other_files_are_rejected():
    with pytest.raises(BadMagicError):
        read_checkpoint(io.BytesIO(b"ATXV\x01\x00" + b"\x00" * 64))


def test_truncated_file(params, momentum):
    data = encoded(params, momentum)
    with pytest.raises(TruncatedRecordError):
        read_checkpoint(io.BytesIO(data[:-5]))
    with pytest.raises(TruncatedRecordError):
        read_checkpoint(io.BytesIO(data[:30]))


def test_missing_step_record(params, momentum):
    data = encoded(params, momentum)
    # the step record is the last frame: 4 byte length, prefix, name, shape and one int64
    step_frame = 4 + 4 + len("meta/step") + 4 + 8
    with pytest.raises(CheckpointError, match="no step record"):
        read_checkpoint(io.BytesIO(data[:-step_frame]))


def test_restore_copies_values(params, momentum):
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, momentum)))
    fresh = {name: Tensor(np.zeros_like(t.data), requires_grad=True)
             for name, t in params.items()}
    buffers = {name: np.zeros_like(t.data) for name, t in params.items()}
    restore_checkpoint(checkpoint, fresh, buffers)
    for name, tensor in params.items():
        np.testing.assert_array_equal(fresh[name].data, tensor.data)
        np.testing.assert_array_equal(buffers[name], momentum[name])
    fresh["rpn.objectness.bias"].data[0] = 99.0
    assert checkpoint.params["rpn.objectness.bias"][0] != 99.0


def test_restore_rejects_missing_parameters(params, momentum):
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, momentum)))
    extra = dict(params, **{"tx_head.qpr.project.bias": Tensor(np.zeros(2))})
    with pytest.raises(CheckpointError, match="tx_head.qpr.project.bias"):
        restore_checkpoint(checkpoint, extra)


def test_restore_rejects_shape_changes(params, momentum):
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, momentum)))
    changed = dict(params)
    changed["rpn.objectness.bias"] = Tensor(np.zeros(5, dtype=np.float32))
    with pytest.raises(CheckpointError, match="shape"):
        restore_checkpoint(checkpoint, changed)


def test_restore_rejects_missing_momentum(params, momentum):
    without_bias = {k: v for k, v in momentum.items() if k != "rpn.objectness.bias"}
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, without_bias)))
    buffers = {name: np.zeros_like(t.data) for name, t in params.items()}
    with pytest.raises(CheckpointError, match="momentum buffers.*rpn.objectness.bias"):
        restore_checkpoint(checkpoint, params, buffers)
    restore_checkpoint(checkpoint, params)


def test_restore_rejects_momentum_shape_changes(params, momentum):
    checkpoint = read_checkpoint(io.BytesIO(encoded(params, momentum)))
    buffers = {name: np.zeros_like(t.data) for name, t in params.items()}
    buffers["rpn.objectness.bias"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(CheckpointError, match="Momentum buffer rpn.objectness.bias"):
        restore_checkpoint(checkpoint, params, buffers)
