"""The ``actiontx`` command line.

Every sub-command accepts ``--config path.ini`` and trailing
``section.key=value`` overrides. Outputs go under ``--output``, or
``$ACTIONTX_OUTPUT_DIR/<command>`` when it is not given.

Exit status: 0 on success, 2 for configuration errors, 3 for any other
failure (missing checkpoint, corrupt files, non-finite loss, ...).
"""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment
from .config import load_config
from .errors import ActionTxError, ConfigError, interpret_error
from .evaluation import write_annotations, write_detections
from .export import write_attention_csv, write_attention_maps, write_key_embedding_pca
from .synthdata import generate_dataset, generate_dataset_async


logger = logging.getLogger("actiontx")

LOG_FORMAT = "[%(asctime)s.%(msecs)03d][%(name)s][%(funcName)s]: %(message)s"
MODE_OVERRIDES = {
    "full": [],
    "gt-boxes": ["train.gt_boxes=true"],
    "action-agnostic": ["train.action_agnostic=true"],
}


def _common(parser):
    parser.add_argument("--config", type=Path, help="INI file with [data], [model], ... sections")
    parser.add_argument("--output", type=Path, help="output directory")
    parser.add_argument("overrides", nargs="*", metavar="section.key=value",
                        help="configuration overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actiontx", description="Spatiotemporal action detection on synthetic clips"
    )
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="render train and eval clip sets")
    _common(gen)
    gen.add_argument("--eval-frames", help="eval clip length: an integer or a multiple like 2T")
    gen.add_argument("--parallel", action="store_true", help="render clips in a thread pool")

    train = commands.add_parser("train", help="train a detector")
    _common(train)
    train.add_argument("--data", type=Path, help="dataset from gen-data (default: in memory)")
    train.add_argument("--mode", choices=sorted(MODE_OVERRIDES), default="full")
    train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train.add_argument("--steps", type=int, help="train at most this many more steps")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    _common(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, help="dataset from gen-data (default: in memory)")
    evaluate.add_argument("--mode", choices=sorted(MODE_OVERRIDES), default="full")
    evaluate.add_argument("--eval-frames", help="clip length: an integer or a multiple like 2T")

    ablate = commands.add_parser("ablate", help="train and evaluate the ablation grid")
    _common(ablate)
    ablate.add_argument("--data", type=Path, help="training dataset (default: in memory)")
    ablate.add_argument("--eval-data", type=Path, help="evaluation dataset")
    ablate.add_argument("--variant", action="append", dest="variants",
                        help="variant name, repeatable (default: all; see --list)")
    ablate.add_argument("--steps", type=int, help="training steps per run")
    ablate.add_argument("--list", action="store_true", help="print variant names and exit")

    dump = commands.add_parser("dump-attention", help="export attention and key maps")
    _common(dump)
    dump.add_argument("--checkpoint", type=Path, required=True)
    dump.add_argument("--data", type=Path, help="dataset from gen-data (default: in memory)")
    dump.add_argument("--clips", type=int, default=1, help="number of clips to export")
    dump.add_argument("--upscale", type=int, default=16)
    return parser


def output_dir(args) -> Path:
    return args.output or experiment.output_root() / args.command


def command_gen_data(args, config, argv):
    root = output_dir(args)
    frames = experiment.parse_eval_frames(args.eval_frames, config.data.clip_length)
    splits = [
        ("train", config.data.scene_spec(), config.data.train_clips),
        ("eval", config.data.scene_spec(config.data.eval_seed, frames), config.data.eval_clips),
    ]
    for name, spec, count in splits:
        if args.parallel:
            manifest = asyncio.run(generate_dataset_async(spec, count, root / name))
        else:
            manifest = generate_dataset(spec, count, root / name)
        print(f"{name}: {len(manifest)} clips, manifest sha256 {manifest.digest}")
    experiment.write_run_record(root, args.command, argv, config)


def command_train(args, config, argv):
    root = output_dir(args)
    experiment.write_run_record(root, args.command, argv, config)
    samples = experiment.training_samples(config, args.data)
    trainer = experiment.train_experiment(config, samples, root, args.resume, args.steps)
    print(f"trained to step {trainer.step}; checkpoint {root / 'final.ckpt'}")


def command_eval(args, config, argv):
    root = output_dir(args)
    model = experiment.load_model(config, args.checkpoint)
    frames = experiment.parse_eval_frames(args.eval_frames, config.data.clip_length)
    samples = experiment.evaluation_samples(config, args.data, frames)
    frequency = experiment.class_frequency(config, experiment.training_samples(config)) \
        if not config.train.action_agnostic else None
    run = experiment.evaluate_model(config, model, samples, frequency)

    experiment.write_run_record(root, args.command, argv, config)
    write_detections(root / "detections.csv", run.detections)
    write_annotations(root / "annotations.csv", run.annotations)
    summary = experiment.summarize(config, run)
    (root / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for threshold, report in run.reports.items():
        # no class has ground truth when the evaluation clips hold no people
        mean_ap = "n/a" if report.mean_ap is None else f"{report.mean_ap:.4f}"
        print(f"mAP@{threshold:g}: {mean_ap}")


def command_ablate(args, config, argv):
    if args.list:
        for name, overrides in experiment.ablation_variants(config):
            print(f"{name}: {' '.join(overrides) or '(defaults)'}")
        return
    root = output_dir(args)
    experiment.write_run_record(root, args.command, argv, config)
    train_set = experiment.training_samples(config, args.data)
    eval_set = experiment.evaluation_samples(config, args.eval_data)
    rows = experiment.run_ablation(config, train_set, eval_set, root, args.variants, args.steps)
    print(f"{len(rows)} runs written to {root / 'results.csv'}")


def command_dump_attention(args, config, argv):
    root = output_dir(args)
    model = experiment.load_model(config, args.checkpoint)
    if model.tx_head is None:
        raise ConfigError("model.head", "attention maps need the tx head")
    samples = experiment.evaluation_samples(config, args.data)[:args.clips]
    experiment.write_run_record(root, args.command, argv, config)
    csv_path = root / "attention.csv"
    for index, sample in enumerate(samples):
        proposals = sample.boxes if config.train.gt_boxes else None
        result = model.detect(sample.frames, proposals, keep_memory=True)
        if result.trace is None:
            logger.warning("no proposals for %s; nothing to export", sample.clip_id)
            continue
        trace = result.trace.select(result.kept)
        write_attention_csv(csv_path, sample.clip_id, trace, append=index > 0)
        write_attention_maps(root / "maps", sample.clip_id, trace, args.upscale)
        write_key_embedding_pca(root / "keys", sample.clip_id, model.tx_head, result.memory,
                                upscale=args.upscale)
    print(f"attention exported to {root}")


COMMANDS = {
    "gen-data": command_gen_data,
    "train": command_train,
    "eval": command_eval,
    "ablate": command_ablate,
    "dump-attention": command_dump_attention,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, datefmt="%H:%M:%S")
    try:
        overrides = list(args.overrides) + MODE_OVERRIDES[getattr(args, "mode", "full")]
        config = load_config(args.config, overrides)
        COMMANDS[args.command](args, config, argv)
    except ConfigError as e:
        logger.error(interpret_error(e))
        return 2
    except (ActionTxError, OSError) as e:
        logger.error(interpret_error(e))
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
