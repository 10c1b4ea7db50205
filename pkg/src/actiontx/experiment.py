"""Training, evaluation and ablation runs shared by the command line."""
import csv
import json
import logging
import os
import platform
import re
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, restore_checkpoint
from .config import ExperimentConfig, config_hash, config_to_dict, dump_config, with_overrides
from .errors import ConfigError
from .evaluation import Annotation, DetectionRecord, EvalReport, evaluate, suppress_background
from .model import ActionDetector
from .synthdata import CLASS_NAMES, CONTEXT_CLASS_IDS, LOCAL_CLASS_IDS, ClipSample
from .synthdata import generate_clip, load_dataset
from .training import Trainer


logger = logging.getLogger(__name__)

OUTPUT_ENV = "ACTIONTX_OUTPUT_DIR"
DEFAULT_OUTPUT = "actiontx-output"
AGNOSTIC_CLASS_NAMES = ("person",)


def output_root(path=None) -> Path:
    return Path(path or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def package_version() -> str:
    try:
        return metadata.version("actiontx")
    except metadata.PackageNotFoundError:
        return "unknown"


def parse_eval_frames(text: Optional[str], clip_length: int) -> int:
    """``None`` keeps the training length; ``2T`` style multiples or a plain integer."""
    if text is None:
        return clip_length
    match = re.fullmatch(r"\s*(\d*)\s*[Tt]\s*", text)
    if match:
        frames = int(match.group(1) or 1) * clip_length
    elif text.strip().isdigit():
        frames = int(text)
    else:
        raise ConfigError("--eval-frames", f"expected an integer or a multiple like 2T, got {text}")
    if frames <= 0 or frames % 4:
        raise ConfigError("--eval-frames", f"must be a positive multiple of 4, got {frames}")
    return frames


def class_names(config: ExperimentConfig) -> Tuple[str, ...]:
    return AGNOSTIC_CLASS_NAMES if config.train.action_agnostic else CLASS_NAMES


def training_samples(config: ExperimentConfig, data_dir=None) -> List[ClipSample]:
    if data_dir is not None:
        return load_dataset(data_dir)
    spec = config.data.scene_spec()
    return [generate_clip(spec, index) for index in range(config.data.train_clips)]


def evaluation_samples(config: ExperimentConfig, data_dir=None, frames=None) -> List[ClipSample]:
    if data_dir is not None:
        return load_dataset(data_dir)
    spec = config.data.scene_spec(seed=config.data.eval_seed, clip_length=frames)
    return [generate_clip(spec, index) for index in range(config.data.eval_clips)]


def class_frequency(config: ExperimentConfig, samples: Sequence[ClipSample]) -> Dict[int, int]:
    if config.train.action_agnostic:
        return {0: sum(len(s.boxes) for s in samples)}
    totals = np.zeros(len(CLASS_NAMES), dtype=int)
    for sample in samples:
        totals += sample.labels.sum(axis=0).astype(int)
    return {index: int(count) for index, count in enumerate(totals)}


def load_model(config: ExperimentConfig, checkpoint_path) -> ActionDetector:
    model = ActionDetector(config)
    checkpoint = load_checkpoint(checkpoint_path, config_hash(config))
    restore_checkpoint(checkpoint, model.parameters())
    return model


def train_experiment(config: ExperimentConfig, samples, output_dir=None, resume=None,
                     steps=None) -> Trainer:
    model = ActionDetector(config)
    trainer = Trainer(config, model, samples)
    if resume is not None:
        trainer.resume(resume)
    trainer.run(output_dir, steps)
    return trainer


def detections_to_records(clip_id, detections, background_threshold=None
                          ) -> List[DetectionRecord]:
    pairs = []
    for detection in detections:
        for class_id, score in enumerate(detection.scores):
            box = detection.box_for(class_id)
            pairs.append((
                DetectionRecord(clip_id, class_id, float(score),
                                (box.x1, box.y1, box.x2, box.y2)),
                detection.background,
            ))
    return suppress_background(pairs, background_threshold)


def evaluation_annotations(config: ExperimentConfig, sample: ClipSample) -> List[Annotation]:
    records = sample.annotations()
    if config.train.action_agnostic:
        return [Annotation(r.clip_id, r.person_id, r.box, (0,)) for r in records]
    return records


@dataclass
class EvaluationRun:
    reports: Dict[float, EvalReport]
    detections: List[DetectionRecord]
    annotations: List[Annotation]


def evaluate_model(config: ExperimentConfig, model: ActionDetector,
                   samples: Sequence[ClipSample], frequency=None) -> EvaluationRun:
    detections, annotations = [], []
    for sample in samples:
        proposals = sample.boxes if config.train.gt_boxes else None
        result = model.detect(sample.frames, proposals)
        detections.extend(detections_to_records(
            sample.clip_id, result.detections, config.eval.background_threshold
        ))
        annotations.extend(evaluation_annotations(config, sample))
    reports = {
        threshold: evaluate(detections, annotations, class_names(config), threshold,
                            config.eval.bins, frequency)
        for threshold in config.eval.iou_thresholds
    }
    return EvaluationRun(reports, detections, annotations)


def summarize(config: ExperimentConfig, run: EvaluationRun):
    summary = {}
    for threshold, report in run.reports.items():
        entry = report.as_dict()
        if not config.train.action_agnostic:
            entry["local_map"] = report.subset_map(LOCAL_CLASS_IDS)
            entry["context_map"] = report.subset_map(CONTEXT_CLASS_IDS)
        summary[f"{threshold:g}"] = entry
    return summary


def write_run_record(directory, command: str, argv: Sequence[str], config: ExperimentConfig):
    """Everything needed to re-run a command: config, seeds and code version."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "seeds": {
            "data": config.data.seed,
            "eval_data": config.data.eval_seed,
            "model": config.model.seed,
            "train": config.train.seed,
        },
        "version": package_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (directory / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    (directory / "run.ini").write_text(dump_config(config))
    return record


def ablation_variants(config: ExperimentConfig) -> List[Tuple[str, List[str]]]:
    ablate = config.ablate
    variants = [
        ("baseline", []),
        ("head=i3d", ["model.head=i3d"]),
        ("head=tx+i3d", ["model.head=tx+i3d"]),
        ("qpr=lowres", ["model.qpr=lowres"]),
    ]
    for heads in ablate.heads_grid:
        for layers in ablate.layers_grid:
            variants.append((f"heads={heads},layers={layers}",
                             [f"model.heads={heads}", f"model.layers={layers}"]))
    variants += [
        ("proposals=small", [f"model.proposals={ablate.small_proposals}"]),
        ("proposals=large", [f"model.proposals={ablate.large_proposals}"]),
        ("gt-boxes", ["train.gt_boxes=true"]),
        ("gt-boxes,head=i3d", ["train.gt_boxes=true", "model.head=i3d"]),
        ("action-agnostic", ["train.action_agnostic=true"]),
        ("action-agnostic,qpr=lowres", ["train.action_agnostic=true", "model.qpr=lowres"]),
        ("no-augmentation", ["train.augment=false"]),
        ("class-specific-regression", ["model.class_agnostic_regression=false"]),
    ]
    return variants


ABLATION_FIELDS = (
    "variant", "seed", "head", "qpr", "heads", "layers", "proposals", "gt_boxes",
    "action_agnostic", "augment", "class_agnostic_regression",
    "map_50", "map_75", "local_map_50", "context_map_50",
)


def run_ablation(config: ExperimentConfig, train_set, eval_set, output_dir,
                 names: Optional[Sequence[str]] = None, steps=None) -> List[dict]:
    """Train and evaluate every selected variant for every seed; one CSV row each."""
    output_dir = Path(output_dir)
    variants = [v for v in ablation_variants(config) if names is None or v[0] in names]
    rows = []
    for name, overrides in variants:
        for seed in config.ablate.seeds:
            variant = with_overrides(
                config, overrides + [f"model.seed={seed}", f"train.seed={seed}"]
            )
            run_dir = output_dir / re.sub(r"[^A-Za-z0-9_.=-]+", "_", name) / f"seed{seed}"
            trainer = train_experiment(variant, train_set, run_dir, steps=steps)
            run = evaluate_model(variant, trainer.model, eval_set)
            first = run.reports.get(0.5)
            strict = run.reports.get(0.75)
            model = variant.model
            rows.append({
                "variant": name, "seed": seed, "head": model.head, "qpr": model.qpr,
                "heads": model.heads, "layers": model.layers, "proposals": model.proposals,
                "gt_boxes": variant.train.gt_boxes,
                "action_agnostic": variant.train.action_agnostic,
                "augment": variant.train.augment,
                "class_agnostic_regression": model.class_agnostic_regression,
                "map_50": first.mean_ap if first else None,
                "map_75": strict.mean_ap if strict else None,
                "local_map_50": first.subset_map(LOCAL_CLASS_IDS)
                if first and not variant.train.action_agnostic else None,
                "context_map_50": first.subset_map(CONTEXT_CLASS_IDS)
                if first and not variant.train.action_agnostic else None,
            })
            logger.info("ablation %s seed %d: mAP@0.5 %s", name, seed, rows[-1]["map_50"])

    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "results.csv", "w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(stream, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
