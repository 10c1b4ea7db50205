"""Keyframe action detection with attention over spatiotemporal clip context."""
from .config import ExperimentConfig, load_config
from .errors import ActionTxError, interpret_error
from .model import ActionDetector

__all__ = ["ActionDetector", "ActionTxError", "ExperimentConfig", "interpret_error",
           "load_config"]
