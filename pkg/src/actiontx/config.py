import configparser
import dataclasses
import hashlib
import io
import json
import typing
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

from .errors import ConfigError
from .synthdata import CLASS_NAMES, SceneSpec


HEAD_TYPES = ("tx", "i3d", "tx+i3d")
QPR_MODES = ("highres", "lowres")


@dataclass
class DataConfig:
    seed: int = 0
    image_size: int = 64
    clip_length: int = 8
    actors_min: int = 2
    actors_max: int = 4
    objects_min: int = 1
    objects_max: int = 3
    train_clips: int = 500
    eval_clips: int = 100
    eval_seed: int = 1000

    def scene_spec(self, seed=None, clip_length=None) -> SceneSpec:
        return SceneSpec(
            seed=self.seed if seed is None else seed,
            image_size=self.image_size,
            clip_length=self.clip_length if clip_length is None else clip_length,
            actors=(self.actors_min, self.actors_max),
            objects=(self.objects_min, self.objects_max),
        )


@dataclass
class ModelConfig:
    seed: int = 0
    dtype: str = "float32"
    trunk_channels: Tuple[int, ...] = (16, 16, 32, 32)
    embedding_hidden: int = 8
    embedding_channels: int = 8
    anchor_scales: Tuple[float, ...] = (12.0, 18.0, 26.0)
    anchor_ratios: Tuple[float, ...] = (2.0,)
    rpn_channels: int = 32
    rpn_nms_iou: float = 0.7
    proposals: int = 300
    head: str = "tx"
    qpr: str = "highres"
    d_model: int = 128
    heads: int = 2
    layers: int = 3
    dropout: float = 0.3
    ffn_hidden: int = 256
    qpr_channels: int = 32
    i3d_channels: int = 32
    class_agnostic_regression: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    base_lr: float = 0.1
    warmup_lr: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_grad_norm: float = 5.0
    augment: bool = True
    gt_boxes: bool = False
    action_agnostic: bool = False
    rpn_loss_weight: float = 1.0
    foreground_iou: float = 0.5
    negative_ratio: int = 3
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = (0.5, 0.75)
    nms_iou: float = 0.5
    max_detections: int = 32
    background_threshold: Optional[float] = None
    bins: int = 4


@dataclass
class AblationConfig:
    seeds: Tuple[int, ...] = (0, 1, 2)
    heads_grid: Tuple[int, ...] = (2, 3, 6)
    layers_grid: Tuple[int, ...] = (2, 3, 6)
    # 64px frames give a 4x4 map with 3 anchors per cell, 48 anchors in all, so a
    # 64-proposal cap would keep every box; 16 keeps the small setting a real cut
    small_proposals: int = 16
    large_proposals: int = 300


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)

    @property
    def num_classes(self) -> int:
        return 1 if self.train.action_agnostic else len(CLASS_NAMES)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablate": AblationConfig,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(field_name, raw, annotation):
    text = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is tuple:
            items = [item.strip() for item in text.split(",") if item.strip()]
            return tuple(_coerce(field_name, item, args[0]) for item in items)
        if origin is typing.Union and type(None) in args:
            if text.lower() in ("", "none"):
                return None
            inner = next(arg for arg in args if arg is not type(None))
            return _coerce(field_name, text, inner)
        if annotation is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return annotation(text)
    except ValueError:
        raise ConfigError(field_name, f"cannot interpret {raw!r} as {annotation}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(str(item) for item in value)
    return str(value)


def build_config(values) -> ExperimentConfig:
    sections = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in values.get(section, {}).items():
            if key not in hints:
                raise ConfigError(f"{section}.{key}", "unknown key")
            kwargs[key] = _coerce(f"{section}.{key}", raw, hints[key])
        sections[section] = cls(**kwargs)
    for section in values:
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    config = ExperimentConfig(**sections)
    validate_config(config)
    return config


def parse_overrides(overrides: Sequence[str]):
    values = {}
    for override in overrides:
        key, sep, raw = override.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(override, "overrides must look like section.key=value")
        values.setdefault(section, {})[name] = raw
    return values


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as stream:
                parser.read_file(stream)
        except configparser.Error as e:
            raise ConfigError(str(path), f"malformed config file: {e}") from None
        for section in parser.sections():
            values[section] = dict(parser.items(section))
    for section, items in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(items)
    return build_config(values)


def with_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    values = {
        section: {key: _format(value) for key, value in items.items()}
        for section, items in config_to_dict(config).items()
    }
    for section, items in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(items)
    return build_config(values)


def validate_config(config: ExperimentConfig):
    data, model, train = config.data, config.model, config.train
    checks = [
        ("data.image_size", data.image_size > 0 and data.image_size % 16 == 0,
         "must be a positive multiple of 16"),
        ("data.clip_length", data.clip_length > 0 and data.clip_length % 4 == 0,
         "must be a positive multiple of 4"),
        ("data.actors_min", 1 <= data.actors_min <= data.actors_max,
         "must be at least 1 and at most data.actors_max"),
        ("data.objects_min", 0 <= data.objects_min <= data.objects_max,
         "must be at least 0 and at most data.objects_max"),
        ("model.dtype", model.dtype in ("float32", "float64"), "must be float32 or float64"),
        ("model.trunk_channels", len(model.trunk_channels) == 4,
         "the trunk has exactly four layers"),
        ("model.head", model.head in HEAD_TYPES, f"must be one of {HEAD_TYPES}"),
        ("model.qpr", model.qpr in QPR_MODES, f"must be one of {QPR_MODES}"),
        ("model.heads", model.heads >= 1, "must be at least 1"),
        ("model.layers", model.layers >= 1, "must be at least 1"),
        ("model.dropout", 0 <= model.dropout < 1, "must be in [0, 1)"),
        ("model.proposals", model.proposals >= 1, "must be at least 1"),
        ("model.anchor_scales", len(model.anchor_scales) >= 1, "needs at least one scale"),
        ("model.anchor_ratios", len(model.anchor_ratios) >= 1, "needs at least one ratio"),
        ("train.warmup_steps", 0 <= train.warmup_steps < train.total_steps,
         "must be smaller than train.total_steps"),
        ("train.batch_size", train.batch_size >= 1, "must be at least 1"),
        ("train.base_lr", train.base_lr > 0, "must be positive"),
        ("train.log_every", train.log_every >= 1, "must be at least 1"),
        ("train.checkpoint_every", train.checkpoint_every >= 0, "must not be negative"),
        ("train.foreground_iou", 0 < train.foreground_iou <= 1, "must be in (0, 1]"),
        ("eval.max_detections", config.eval.max_detections >= 1, "must be at least 1"),
    ]
    for field_name, ok, message in checks:
        if not ok:
            raise ConfigError(field_name, message)


def config_to_dict(config: ExperimentConfig):
    return dataclasses.asdict(config)


def dump_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config_to_dict(config).items():
        parser[section] = {key: _format(value) for key, value in values.items()}
    stream = io.StringIO()
    parser.write(stream)
    return stream.getvalue()


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that decides parameter shapes and their meaning."""
    payload = {
        "model": dataclasses.asdict(config.model),
        "num_classes": config.num_classes,
        "image_size": config.data.image_size,
    }
    canonical = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
