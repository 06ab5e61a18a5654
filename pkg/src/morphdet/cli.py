"""Command-line front end.

Subcommands: gen (write a toy benchmark to disk), train (alternating
optimization on a generated split), morph (register novel classes into a
checkpoint from an exemplar file, no training), eval (score a checkpoint on a
split), experiment (run a canned study and emit its tables).

Exit codes: 0 success, 1 usage, 2 bad input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

from .em_trainer import (
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)
from .embedder import grad_evaluation_count
from .evalkit import evaluate, report_table_rows, report_to_json, write_report_csv
from .experiments import (
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    build_world,
    experiment_config_from_dict,
)
from .morph_inference import DetectConfig, morph, read_exemplars_csv, write_exemplars_csv
from .prototype_store import read_vector_file, write_vector_file
from .textio import sha256_file
from .toyworld import load_dataset, load_universe, save_dataset, save_universe

GEN_FILES = ("universe.txt", "semantics.txt", "train_base.txt", "eval_base.txt", "eval_novel.txt", "exemplars.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our own codes.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return experiment_config_from_dict(data)


def _apply_train_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    tcfg = config.train
    if getattr(args, "em_iterations", None) is not None:
        tcfg = replace(tcfg, em_iterations=args.em_iterations)
    if getattr(args, "lam", None) is not None:
        tcfg = replace(tcfg, lam=args.lam)
    if getattr(args, "epochs", None) is not None:
        tcfg = replace(tcfg, m_step_epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if getattr(args, "lr", None) is not None:
        tcfg = replace(tcfg, learning_rate=args.lr)
    if getattr(args, "batch_size", None) is not None:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    return replace(config, train=tcfg)


def cmd_gen(args) -> int:
    config = load_experiment_config(args.config)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    if args.shots is not None:
        config = replace(config, shots=args.shots)
    seed = config.train.seed
    os.makedirs(args.out, exist_ok=True)
    world = build_world(config, seed)

    paths = {name: os.path.join(args.out, name) for name in GEN_FILES}
    save_universe(paths["universe.txt"], world.universe)
    write_vector_file(paths["semantics.txt"], world.semantics)
    save_dataset(paths["train_base.txt"], world.train_scenes)
    save_dataset(paths["eval_base.txt"], world.eval_base)
    save_dataset(paths["eval_novel.txt"], world.eval_novel)
    write_exemplars_csv(paths["exemplars.csv"], world.exemplars)

    manifest = {
        "seed": seed,
        "shots": config.shots,
        "base_class_ids": world.base_ids,
        "novel_class_ids": world.novel_ids,
        "universe": world.universe.split_manifest(),
        "scene_counts": {
            "train_base": len(world.train_scenes),
            "eval_base": len(world.eval_base),
            "eval_novel": len(world.eval_novel),
        },
        "files": {name: sha256_file(path) for name, path in sorted(paths.items())},
    }
    manifest_path = os.path.join(args.out, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for name in GEN_FILES + ("manifest.json",):
        print(f"wrote {os.path.join(args.out, name)}")
    print(f"{len(world.base_ids)} base / {len(world.novel_ids)} novel classes, seed {seed}")
    return 0


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing input: {path}")
    return path


def cmd_train(args) -> int:
    config = _apply_train_overrides(load_experiment_config(args.config), args)
    dataset = load_dataset(_require(os.path.join(args.data, "train_base.txt")))
    semantics = read_vector_file(_require(os.path.join(args.data, "semantics.txt")))
    os.makedirs(args.out, exist_ok=True)

    result = train(dataset, semantics, config.train)
    for k, snap in enumerate(result.snapshots, start=1):
        path = os.path.join(args.out, f"checkpoint_iter{k}.ckpt")
        save_checkpoint(path, snap)
        print(f"wrote {path}")
    metrics_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(metrics_path, result.metrics)
    print(f"wrote {metrics_path}")
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"final epoch loss: total {last.total:.6f} (fg {last.fg:.6f}, bg {last.bg:.6f}, bbox {last.bbox:.6f})")
    return 0


def cmd_morph(args) -> int:
    state = load_checkpoint(_require(args.checkpoint))
    exemplars = read_exemplars_csv(_require(args.exemplars))
    if args.shots is not None:
        exemplars = {cid: vecs[: args.shots] for cid, vecs in exemplars.items()}

    before = grad_evaluation_count()
    start = time.perf_counter()
    morphed = morph(state, exemplars)
    elapsed_ms = (time.perf_counter() - start) * 1e3
    if grad_evaluation_count() != before:
        raise RuntimeError("morph path computed gradients; registration must be forward-only")

    save_checkpoint(args.out, morphed)
    added = sorted(set(morphed.prototypes.novel) - set(state.prototypes.novel))
    print(f"registered {len(added)} classes in {elapsed_ms:.3f} ms")
    print(f"wrote {args.out}")
    return 0


def _split_ids(data_dir: str) -> tuple[list[int], list[int]]:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        return list(manifest["base_class_ids"]), list(manifest["novel_class_ids"])
    universe = load_universe(_require(os.path.join(data_dir, "universe.txt")))
    split = universe.split_manifest()
    return list(split["base_class_ids"]), list(split["novel_class_ids"])


def _eval_one(state, scenes, base_ids, novel_ids, split: str, config: DetectConfig):
    if split == "base":
        return evaluate(state, scenes, base_ids, [], config)
    if split == "novel":
        return evaluate(state, scenes, [], novel_ids, config)
    # Novel classes the checkpoint has not registered yet stay out of the
    # report rather than erroring: pre-morph evals just lack a novel section.
    present = [cid for cid in novel_ids if state.prototypes.has_class(cid)]
    return evaluate(state, scenes, base_ids, present, config)


def cmd_eval(args) -> int:
    state = load_checkpoint(_require(args.checkpoint))
    base_ids, novel_ids = _split_ids(args.data)
    if args.split == "base":
        scenes = load_dataset(_require(os.path.join(args.data, "eval_base.txt")))
    elif args.split == "novel":
        scenes = load_dataset(_require(os.path.join(args.data, "eval_novel.txt")))
    else:
        scenes = load_dataset(_require(os.path.join(args.data, "eval_base.txt")))
        scenes += load_dataset(_require(os.path.join(args.data, "eval_novel.txt")))
    detect_config = DetectConfig(score_threshold=args.score_threshold, nms_iou=args.nms_iou)

    os.makedirs(args.out, exist_ok=True)
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    report = _eval_one(state, scenes, base_ids, novel_ids, args.split, detect_config)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))
    rows = report_table_rows(name, report)

    if args.baseline_checkpoint is not None:
        base_state = load_checkpoint(_require(args.baseline_checkpoint))
        base_name = os.path.splitext(os.path.basename(args.baseline_checkpoint))[0]
        baseline = _eval_one(base_state, scenes, base_ids, novel_ids, args.split, detect_config)
        with open(os.path.join(args.out, "baseline_report.json"), "w", encoding="utf-8") as fh:
            fh.write(report_to_json(baseline))
        rows += report_table_rows(base_name, baseline)

    write_report_csv(os.path.join(args.out, "report.csv"), rows)
    print(f"wrote {os.path.join(args.out, 'report.json')}")
    print(f"wrote {os.path.join(args.out, 'report.csv')}")
    for row in rows:
        print(f"{row['method']:>24s} {row['split']:>6s}  ap {row['ap']:.4f}  ap50 {row['ap50']:.4f}  ap75 {row['ap75']:.4f}")
    return 0


def cmd_experiment(args) -> int:
    if args.name not in EXPERIMENTS:
        names = ", ".join(sorted(EXPERIMENTS))
        raise UsageError(f"unknown experiment {args.name!r}; valid names: {names}")
    config = _apply_train_overrides(load_experiment_config(args.config), args)
    if args.seeds is not None:
        config = replace(config, seeds=args.seeds)
    out_dir = args.out or config.out_dir
    if out_dir is None:
        raise UsageError("experiment needs --out (or out_dir in the config file)")
    os.makedirs(out_dir, exist_ok=True)
    _, summary = EXPERIMENTS[args.name](config, out_dir)
    for row in summary:
        print("  ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    print(f"wrote {args.name} tables to {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="morphdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", help="generate a toy benchmark directory", parents=[])
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shots", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="alternating training on a generated split")
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--em-iterations", type=int, default=None, dest="em_iterations")
    p.add_argument("--lambda", type=float, default=None, dest="lam", help="prototype blend weight")
    p.add_argument("--epochs", type=int, default=None, help="epochs per M-step")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("morph", help="register novel classes from exemplars (no training)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--exemplars", required=True, help="exemplar CSV (class_id, descriptor...)")
    p.add_argument("--out", required=True, help="path for the morphed checkpoint")
    p.add_argument("--shots", type=int, default=None, help="cap exemplars per class")
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("eval", help="score a checkpoint on a generated split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.add_argument("--split", choices=("base", "novel", "all"), default="all")
    p.add_argument("--out", required=True, help="output directory for report files")
    p.add_argument("--baseline-checkpoint", default=None, dest="baseline_checkpoint",
                   help="second checkpoint reported side by side")
    p.add_argument("--score-threshold", type=float, default=0.05, dest="score_threshold")
    p.add_argument("--nms-iou", type=float, default=0.5, dest="nms_iou")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a canned study")
    p.add_argument("name", help="one of: " + ", ".join(sorted(EXPERIMENTS)))
    p.add_argument("--out", default=None, help="output directory for the tables")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seeds", type=int, default=None, help="number of trials")
    p.add_argument("--seed", type=int, default=None, help="base seed for the trials")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # Covers checkpoint, config, collision, dimension and box errors.
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
