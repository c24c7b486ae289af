"""Command-line entry point: ``moecnn train|eval|analyze|macs|sweep``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import harness
from .autograd import NonFiniteError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import CorruptFileError
from .moe import RoutingMode

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_run_args(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="desk",
                   help="base configuration that --config overrides (default: desk)")
    p.add_argument("--config", help="config file; keys not given keep the preset's values")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moecnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    _add_run_args(p, "output directory (default: the config's out_dir)")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    for name, text in (("eval", "evaluate a checkpoint on its test set"),
                       ("analyze", "write specialization, correlation and gate-logit reports")):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint", help="checkpoint file or a run directory containing one")
        p.add_argument("--out", help="directory for the report files (default: next to the checkpoint)")
        if name == "eval":
            p.add_argument("--mode", default="sparse", help="sparse, dense or forced:<i>")
        else:
            p.add_argument("--layer", type=int, default=0, help="MoE layer index to analyze")

    p = sub.add_parser("macs", help="full-width MAC and parameter report")
    _add_run_args(p, "directory to also write macs.csv into")

    p = sub.add_parser("sweep", help="train several seeds and aggregate mean and sample std")
    _add_run_args(p, "sweep directory (one sub-directory per seed)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--workers", type=int, default=1, help="independent processes to run seeds in")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    return parser


def resolve_config(args) -> RunConfig:
    config = cfgmod.PRESETS[args.preset]()
    if args.config:
        config = cfgmod.load(args.config, base=config)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        config.epochs = args.epochs
    if args.out:
        config.out_dir = args.out
    return config


def _checkpoint_path(path: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.ckpt")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found")
    return path


def _write(out_dir: str, name: str, text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def cmd_train(args) -> int:
    config = resolve_config(args)
    config.validate()
    result = harness.train(config, out_dir=config.out_dir, resume=args.resume, force=args.force)
    print(harness.run_summary(config, result), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    mode = RoutingMode.parse(args.mode)
    path = _checkpoint_path(args.checkpoint)
    model, config, _ = harness.model_from_checkpoint(path)
    config.validate()
    _, test = harness.load_datasets(config)
    result = harness.evaluate(model, test, mode)
    text = harness.eval_summary(result)
    _write(args.out or os.path.dirname(path), f"eval_{mode.kind}{'' if mode.expert is None else mode.expert}.txt",
           text)
    print(text, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    path = _checkpoint_path(args.checkpoint)
    model, config, _ = harness.model_from_checkpoint(path)
    config.validate()
    _, test = harness.load_datasets(config)
    if not 0 <= args.layer < len(model.moe_layers()):
        raise ConfigError(f"model has {len(model.moe_layers())} MoE layer(s), got --layer {args.layer}")
    out = args.out or os.path.join(os.path.dirname(path), "analysis")
    files = harness.analyze(model, test, out, args.layer)["files"]
    print(files["analysis.txt"], end="")
    print(f"wrote {', '.join(sorted(files))} to {out}")
    return EXIT_OK


def cmd_macs(args) -> int:
    config = resolve_config(args)
    config.validate(check_paths=False)
    text = harness.mac_table(config.model)
    if args.out:
        _write(args.out, "macs.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds {args.seeds!r}") from exc
    if not seeds or args.workers < 1:
        raise ConfigError("--seeds must list at least one seed and --workers must be >= 1")
    result = harness.sweep(config, seeds, config.out_dir, args.workers)
    for key, (mean, std) in result["aggregate"].items():
        print(f"{key}: {mean:.4f} +- {std:.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "macs": cmd_macs,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except harness.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        for key, value in exc.diagnostics.items():
            print(f"  {key}: {value}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, CorruptFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
