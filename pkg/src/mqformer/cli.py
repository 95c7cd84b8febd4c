"""Command line: gen-data, pretrain, finetune, eval, inspect.

Configuration precedence, lowest to highest: built-in defaults, the run
config stored in an input checkpoint, ``--preset``, ``--config`` file, the
MQF_SEED environment variable, explicit flags (``--seed``, ``--steps``,
``--ablate``, ``--tasks``, ``--set key=value``).

Exit codes: 0 success, 1 usage error, 2 validation error, 3 accuracy below
``--min-accuracy``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_THRESHOLD = 0, 1, 2, 3

logger = logging.getLogger("mqformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _apply_threads(n: int) -> None:
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _common(p, config=True):
    p.add_argument("--seed", type=int, help="overrides config and MQF_SEED")
    p.add_argument("--threads", type=int, default=None, help="BLAS worker threads (default: logical cores)")
    if config:
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--preset", choices=("default", "reference"), default="default")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mqformer", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic scene records")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("pretrain", help="stage-1 training over the four objectives")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--ablate", help="comma list of no-vit,no-odm,no-ssm,no-vr")
    p.add_argument("--trace", type=Path, help="loss trace path (default: OUT.trace.tsv)")
    p.add_argument("--checkpoint-dir", type=Path)
    _common(p)

    p = sub.add_parser("finetune", help="stage-2 instruction tuning with LoRA")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tasks")
    p.add_argument("--steps", type=int)
    p.add_argument("--lm-steps", type=int, help="base LM pre-training steps")
    p.add_argument("--ablate")
    _common(p)

    p = sub.add_parser("eval", help="score generations")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--task", default="rec")
    p.add_argument("--min-accuracy", type=float)
    p.add_argument("--report", type=Path, help="summary path (records go to REPORT.records.jsonl)")
    p.add_argument("--ablate")
    _common(p, config=False)

    p = sub.add_parser("inspect", help="render masks or list parameters")
    isub = p.add_subparsers(dest="what", parser_class=_Parser)
    m = isub.add_parser("masks")
    m.add_argument("--layout", required=True, help="n_vq,n_gq,len_spatial,len_caption")
    m.add_argument("--objective", required=True)
    q = isub.add_parser("params")
    q.add_argument("--ckpt", type=Path, required=True)
    return ap


def _resolve(args, extra: dict, base: dict = None):
    """Merge config layers; ``base`` (a checkpoint's run config) sits under everything else."""
    from .pipeline import PRESETS, ConfigError, RunConfig, parse_config_text

    layers = [base or {}, PRESETS[getattr(args, "preset", "default")]]
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            layers.append(parse_config_text(cfg_path.read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
    env_seed = os.environ.get("MQF_SEED")
    if env_seed is not None:
        layers.append({"seed": env_seed})
    flags = {}
    for item in getattr(args, "overrides", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.threads is not None:
        flags["threads"] = args.threads
    flags.update({k: v for k, v in extra.items() if v is not None})
    layers.append(flags)
    return RunConfig.resolve(*layers)


def _check_writable(path: Path) -> None:
    from .pipeline import ConfigError

    parent = path.resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise ConfigError(f"cannot write to {path}")


def _need_file(path: Path, what: str) -> None:
    from .pipeline import ConfigError

    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")


def cmd_gen_data(args) -> int:
    from .pipeline import ConfigError, log_run_config
    from .scene import generate_dataset, write_scenes

    if args.scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    run = _resolve(args, {})
    _check_writable(args.out)
    log_run_config(run, "gen-data")
    write_scenes(args.out, generate_dataset(args.scenes, run["seed"], run.scene_config()))
    logger.info("wrote %d scenes to %s", args.scenes, args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pipeline import ConfigError, log_run_config, pretrain
    from .scene import read_scenes

    if args.steps is not None and args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    run = _resolve(args, {"train.total_steps": args.steps, "ablate": args.ablate})
    _need_file(args.data, "data file")
    _check_writable(args.out)
    if args.checkpoint_dir is not None and not args.checkpoint_dir.is_dir():
        raise ConfigError(f"checkpoint dir does not exist: {args.checkpoint_dir}")
    trace = args.trace or Path(str(args.out) + ".trace.tsv")
    _check_writable(trace)
    scenes = read_scenes(args.data)
    if not scenes:
        raise ConfigError("data file holds no scenes")
    log_run_config(run, "pretrain")
    trace.write_text("", encoding="utf-8")
    ck, lines = pretrain(run, scenes, trace_path=trace, checkpoint_dir=args.checkpoint_dir)
    ck.save(args.out)
    logger.info("pretrain done: %d steps, checkpoint %s, trace %s", len(lines), args.out, trace)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from . import genstage as G
    from .pipeline import ConfigError, finetune, instruction_items, log_run_config, pretrain_base_lm, stage2_init
    from .scene import read_scenes
    from .trainer import Checkpoint

    _need_file(args.ckpt, "stage-1 checkpoint")
    _need_file(args.data, "data file")
    try:
        ck = Checkpoint.load(args.ckpt)
    except ValueError as exc:
        raise ConfigError(f"{args.ckpt}: {exc}") from exc
    if ck.config.get("stage") != 1:
        raise ConfigError(f"{args.ckpt} is not a stage-1 checkpoint")
    run = _resolve(args, {
        "finetune.tasks": args.tasks, "finetune.steps": args.steps, "lm.steps": args.lm_steps, "ablate": args.ablate,
    }, base=ck.config.get("run"))
    if args.steps is not None and args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    _check_writable(args.out)
    scenes = read_scenes(args.data)
    if not scenes:
        raise ConfigError("data file holds no scenes")
    log_run_config(run, "finetune")
    lm_params, _ = pretrain_base_lm(run, scenes, trace_path=None)
    params = stage2_init(run, ck, lm_params)
    records, items = instruction_items(run, scenes, run.tasks())
    if not items:
        raise ConfigError("no instruction records could be built for the requested tasks")
    G.write_instructions(Path(str(args.out) + ".instructions.jsonl"), records)
    trace = Path(str(args.out) + ".trace.tsv")
    trace.write_text("", encoding="utf-8")
    out_ck, lines = finetune(run, params, items, trace_path=trace)
    out_ck.save(args.out)
    logger.info("finetune done: %d records, %d steps, checkpoint %s", len(records), len(lines), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import fingerprint
    from .pipeline import ConfigError, evaluate, log_run_config
    from .scene import read_scenes
    from .trainer import Checkpoint

    _need_file(args.ckpt, "checkpoint")
    _need_file(args.data, "data file")
    try:
        raw = args.ckpt.read_bytes()
        ck = Checkpoint.from_bytes(raw)
    except ValueError as exc:
        raise ConfigError(f"{args.ckpt}: {exc}") from exc
    run = _resolve(args, {"ablate": args.ablate}, base=ck.config.get("run"))
    scenes = read_scenes(args.data)
    log_run_config(run, "eval")
    report = evaluate(run, ck.params, scenes, args.task, {"config": fingerprint(run.to_dict()), "checkpoint": fingerprint(raw)})
    sys.stdout.write(report.summary())
    if args.report:
        report.write(args.report, Path(str(args.report) + ".records.jsonl"))
    if args.min_accuracy is not None and report.accuracy < args.min_accuracy:
        logger.error("accuracy %.4f below threshold %.4f", report.accuracy, args.min_accuracy)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .pipeline import ConfigError

    if args.what == "masks":
        from .model import build_mask, render_mask

        try:
            layout = tuple(int(x) for x in args.layout.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad layout {args.layout!r}") from exc
        if len(layout) != 4:
            raise ConfigError("layout needs four comma-separated lengths")
        try:
            mask = build_mask(args.objective.upper(), layout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        sys.stdout.write(f"{mask.objective} layout={','.join(map(str, layout))}\n{render_mask(mask)}\n")
        return EXIT_OK
    if args.what == "params":
        import numpy as np

        from .trainer import Checkpoint

        _need_file(args.ckpt, "checkpoint")
        ck = Checkpoint.load(args.ckpt)
        for name, arr in ck.params.items():
            sys.stdout.write(f"{name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}\t{float(np.linalg.norm(arr)):.6f}\n")
        sys.stdout.write(f"step\t{ck.step}\n")
        return EXIT_OK
    raise UsageError("inspect needs 'masks' or 'params'")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        sys.stderr.write(f"mqformer: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _apply_threads(getattr(args, "threads", None) or 0)
    from .pipeline import ConfigError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"mqformer: error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"mqformer: invalid configuration: {exc}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
