"""pytest fixtures for code that builds on actiontx.

Registered through the ``pytest11`` entry point, so installing the package
makes ``tiny_config``, ``clip_factory``, ``synthetic_dataset`` and
``gradcheck`` available to every test session.
"""
import logging

import pytest
import pytest_asyncio

from .config import ExperimentConfig, build_config
from .errors import ActionTxError, interpret_error
from .synthdata import ClipSample, DatasetManifest, generate_clip, generate_dataset_async
from .tensor import GradCheckReport, grad_check


TINY_CONFIG = {
    "data": {
        "image_size": "64", "clip_length": "4", "actors_min": "2", "actors_max": "3",
        "train_clips": "4", "eval_clips": "2",
    },
    "model": {
        "dtype": "float64", "trunk_channels": "4, 4, 8, 8", "embedding_hidden": "4",
        "embedding_channels": "4", "rpn_channels": "8", "proposals": "16", "d_model": "16",
        "ffn_hidden": "16", "qpr_channels": "4", "i3d_channels": "8", "heads": "2",
        "layers": "2", "dropout": "0.1",
    },
    "train": {
        "total_steps": "6", "warmup_steps": "2", "batch_size": "2", "checkpoint_every": "0",
        "log_every": "1", "base_lr": "0.01", "warmup_lr": "0.001",
    },
    "eval": {"bins": "2"},
    "ablate": {"seeds": "0", "heads_grid": "1", "layers_grid": "1"},
}


def tiny_config_values(**sections):
    """The tiny configuration as raw INI values, with `sections` merged in."""
    values = {section: dict(items) for section, items in TINY_CONFIG.items()}
    for section, items in sections.items():
        values.setdefault(section, {}).update({k: str(v) for k, v in items.items()})
    return values


class ClipFactory:
    """Renders (and caches) clips from the tiny configuration's scene spec."""

    def __init__(self, config: ExperimentConfig):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        self.cache = {}

    def __call__(self, index=0, clip_length=None, seed=None) -> ClipSample:
        key = (index, clip_length, seed)
        if key not in self.cache:
            spec = self.config.data.scene_spec(seed, clip_length)
            self.logger.debug("rendering clip %d of %s", index, spec)
            self.cache[key] = generate_clip(spec, index)
        return self.cache[key]


class GradChecker:
    """Runs :func:`grad_check` and fails the test with a readable report."""

    def __init__(self, tolerance=1e-4, step=1e-5):
        self.tolerance = tolerance
        self.step = step
        self.reports = []

    def __call__(self, loss_fn, params, **kwargs) -> GradCheckReport:
        __tracebackhide__ = True
        kwargs.setdefault("tolerance", self.tolerance)
        kwargs.setdefault("step", self.step)
        try:
            report = grad_check(loss_fn, params, **kwargs)
        except ActionTxError as e:
            pytest.fail(interpret_error(e))
        self.reports.append(report)
        if not report.passed:
            pytest.fail(describe_failures(report))
        return report


def describe_failures(report: GradCheckReport) -> str:
    lines = [
        f"{check.name}: relative error {check.max_relative_error:.3g}"
        for check in report.failures
    ]
    return f"Gradient check failed (tolerance {report.tolerance:g}):\n  " + "\n  ".join(lines)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return build_config(tiny_config_values())


@pytest.fixture
def clip_factory(tiny_config) -> ClipFactory:
    return ClipFactory(tiny_config)


@pytest_asyncio.fixture
async def synthetic_dataset(tiny_config, tmp_path) -> DatasetManifest:
    spec = tiny_config.data.scene_spec()
    return await generate_dataset_async(spec, tiny_config.data.train_clips, tmp_path / "data")


@pytest.fixture
def gradcheck() -> GradChecker:
    return GradChecker()
