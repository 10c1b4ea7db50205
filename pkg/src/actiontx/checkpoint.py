"""Versioned binary checkpoints.

Layout: the ``ATXC`` magic, a version number and the 64-character config hash,
followed by length-prefixed tensor records: every parameter under its own
name, every momentum buffer under ``momentum/<name>`` and the step counter as
``meta/step``.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from . import framing
from .errors import CheckpointConfigMismatch, CheckpointError


logger = logging.getLogger(__name__)

MAGIC = b"ATXC"
VERSION = 1
MOMENTUM_PREFIX = "momentum/"
STEP_RECORD = "meta/step"


@dataclass
class Checkpoint:
    config_hash: str
    step: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)


def write_checkpoint(stream, params: Mapping, momentum: Mapping[str, np.ndarray], step: int,
                     config_hash: str):
    framing.write_header(stream, MAGIC, VERSION, "64s", config_hash.encode("ascii"))
    for name, tensor in params.items():
        framing.write_tensor_record(stream, name, np.asarray(getattr(tensor, "data", tensor)))
    for name, buffer in momentum.items():
        framing.write_tensor_record(stream, MOMENTUM_PREFIX + name, np.asarray(buffer))
    framing.write_tensor_record(stream, STEP_RECORD, np.array([step], dtype=np.int64))


def read_checkpoint(stream, expected_hash: Optional[str] = None) -> Checkpoint:
    version, raw_hash = framing.read_header(stream, MAGIC, "64s")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    actual_hash = raw_hash.decode("ascii")
    if expected_hash is not None and actual_hash != expected_hash:
        raise CheckpointConfigMismatch(expected_hash, actual_hash)

    checkpoint = Checkpoint(actual_hash, -1)
    while True:
        record = framing.read_tensor_record(stream)
        if record is None:
            break
        name, array = record
        if name == STEP_RECORD:
            checkpoint.step = int(array[0])
        elif name.startswith(MOMENTUM_PREFIX):
            checkpoint.momentum[name[len(MOMENTUM_PREFIX):]] = array
        else:
            checkpoint.params[name] = array
    if checkpoint.step < 0:
        raise CheckpointError("Checkpoint has no step record")
    return checkpoint


def save_checkpoint(path, params, momentum, step, config_hash):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    with open(partial, "wb") as stream:
        write_checkpoint(stream, params, momentum, step, config_hash)
    os.replace(partial, path)
    logger.info("saved checkpoint %s at step %d", path, step)


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as stream:
        return read_checkpoint(stream, expected_hash)


def restore_checkpoint(checkpoint: Checkpoint, params: Mapping, momentum=None):
    """Copy saved values into live parameters and, when given, momentum buffers.

    Every live parameter and every requested buffer must be in the checkpoint
    with the same shape.
    """
    missing = sorted(set(params) - set(checkpoint.params))
    if missing:
        raise CheckpointError(f"Checkpoint lacks parameters {missing}")
    for name, tensor in params.items():
        saved = checkpoint.params[name]
        if saved.shape != tensor.shape:
            raise CheckpointError(
                f"Parameter {name} has shape {saved.shape} in the checkpoint, "
                f"{tensor.shape} in the model"
            )
        tensor.data = saved.astype(tensor.dtype, copy=True)
    if momentum is not None:
        lacking = sorted(set(momentum) - set(checkpoint.momentum))
        if lacking:
            raise CheckpointError(f"Checkpoint lacks momentum buffers {lacking}")
        for name in momentum:
            saved = checkpoint.momentum[name]
            if saved.shape != momentum[name].shape:
                raise CheckpointError(
                    f"Momentum buffer {name} has shape {saved.shape} in the checkpoint, "
                    f"{momentum[name].shape} in the optimizer"
                )
            momentum[name] = saved.astype(momentum[name].dtype, copy=True)
