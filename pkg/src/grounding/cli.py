"""Command-line entry point: data generation, training, evaluation and debugging."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, scenes
from .evaluation import export_masks, pointing_game, random_baseline, records_from_scenes, segmentation_map
from .model import GroundingModel
from .training import ABLATIONS, TrainConfig, prepare, train
from .trees import build_grounding_tree, dump_constraints, parse_sexpr

logger = logging.getLogger("grounding")


class CommandError(Exception):
    """Invalid input detected before any side effect."""


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not (p / "scenes.jsonl").is_file():
        raise CommandError(f"{what} {path!r} has no scenes.jsonl")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} {path!r} does not exist")
    return p


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    if args.count < 0 or args.test_count < 0:
        raise CommandError("--count and --test-count must be non-negative")
    spec = scenes.SceneSpec(image_size=args.image_size, object_count=args.objects, noise=args.noise)
    train_set = scenes.generate_dataset(args.seed, args.count, spec)
    scenes.write_dataset(train_set, args.out)
    if args.test_count:
        test_set = scenes.generate_dataset(args.seed, args.test_count, spec, start=args.count)
        scenes.write_dataset(test_set, Path(args.out) / "test")
    _emit({"train": args.count, "test": args.test_count, "out": str(args.out)})
    return 0


def cmd_train(args) -> int:
    data = _require_dir(args.data, "data directory")
    overrides = {"ablation": args.ablation, "seed": args.seed, "epochs": args.epochs}
    if args.config is not None:
        config = TrainConfig.load(_require_file(args.config, "config"), **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.resume is not None:
        _require_file(args.resume, "checkpoint")
    samples = scenes.read_dataset(data)
    result = train(
        config,
        samples,
        out_path=args.out,
        log_path=args.log,
        checkpoint_dir=args.checkpoint_dir,
        resume_from=args.resume,
    )
    last = result.log[-1][1] if result.log else None
    _emit({"model": str(args.out), "steps": len(result.log), "final_L": last.L if last else None})
    return 0


def _load_eval_inputs(args):
    model = GroundingModel.load(_require_file(args.model, "model"))
    samples = scenes.read_dataset(_require_dir(args.data, "data directory"))
    return model, samples


def cmd_eval_pointing(args) -> int:
    model, samples = _load_eval_inputs(args)
    records = records_from_scenes(samples)
    rng = np.random.default_rng(args.seed)
    result = pointing_game(model, records, tie_break=args.tie_break, rng=rng)
    out = result.to_json()
    out["pointing"]["random_baseline"] = random_baseline(records)
    _emit(out)
    return 0


def cmd_eval_seg(args) -> int:
    model, samples = _load_eval_inputs(args)
    result = segmentation_map(model, samples, threshold_rule=args.threshold)
    _emit(result.to_json())
    return 0


def cmd_export_masks(args) -> int:
    model, samples = _load_eval_inputs(args)
    by_id = {s.id: s for s in samples}
    if args.id not in by_id:
        raise CommandError(f"no scene with id {args.id!r} in {args.data}")
    sample = by_id[args.id]
    if args.phrase:
        phrases = [p.lower().split() for p in args.phrase]
    else:
        phrases = [list(p) for p in prepare([sample])[0].positives]
    paths = export_masks(model, sample.image, phrases, args.out)
    _emit({"masks": [str(p) for p in paths]})
    return 0


def cmd_dump_constraints(args) -> int:
    if args.tree is not None:
        texts = [args.tree]
    else:
        source = sys.stdin if args.file == "-" else open(_require_file(args.file, "tree file"), encoding="utf-8")
        with source:
            texts = [line for line in source if line.strip()]
    for i, text in enumerate(texts):
        if i:
            print()
        tree = build_grounding_tree(parse_sexpr(text), include_leaves=not args.no_leaves)
        print(dump_constraints(tree))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed)
    print(gradcheck.format_table(results, args.tolerance))
    return 0 if all(err <= args.tolerance for _, err in results) else 1


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grounding",
        description="Weakly supervised phrase grounding with parse-tree structural losses.",
        allow_abbrev=False,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic scene dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True, help="number of training scenes")
    p.add_argument("--test-count", type=int, default=0, help="extra held-out scenes written to OUT/test")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--image-size", type=int, default=80)

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--ablation", choices=ABLATIONS, help="overrides the config")
    p.add_argument("--seed", type=int, help="overrides the config")
    p.add_argument("--epochs", type=int, help="overrides the config")
    p.add_argument("--log", help="CSV loss log")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = add("eval-pointing", cmd_eval_pointing, "pointing-game accuracy as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tie-break", choices=("first", "random"), default="first")
    p.add_argument("--seed", type=int, default=0, help="rng seed for random tie-breaking")

    p = add("eval-seg", cmd_eval_seg, "segmentation mAP as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", choices=("midpoint", "half-range"), default="midpoint")

    p = add("export-masks", cmd_export_masks, "write attention masks of one scene as PGM files")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", required=True, help="scene id")
    p.add_argument("--out", required=True)
    p.add_argument("--phrase", action="append", help="phrase to ground (repeatable); default: every tree phrase")

    p = add("dump-constraints", cmd_dump_constraints, "list valid nodes, pc-pairs and sibling sets")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tree", help="one bracketed tree")
    src.add_argument("--file", help="file with one tree per line, or - for stdin")
    p.add_argument("--no-leaves", action="store_true", help="exclude noun leaves from the valid nodes")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError, KeyError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"grounding {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
