"""Command-line entry points: validate-spec, train, prune, report, sweep.

Errors print one line ``error: <kind>: <message>`` on stderr and exit
nonzero (2 for usage problems, 1 for failures during a run).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .data import DataError
from .gates import init_gates
from .graph.runtime import instantiate
from .graph.shortcuts import GRANULARITIES
from .graph.spec import SpecError, shape_table
from .metrics import CompressionReport, count_flops, count_params
from .optim import SGD
from .pipeline import (
    ConfigError,
    ExperimentConfig,
    PipelineError,
    TrainSettings,
    accuracy,
    load_data,
    prune_pipeline,
    resolve_spec,
    split_off,
    sweep,
    train,
    with_shortcuts,
)


class UsageError(Exception):
    pass


def _granularities(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    for p in parts:
        if p not in GRANULARITIES:
            raise argparse.ArgumentTypeError(f"unknown granularity {p!r} (choose from {','.join(GRANULARITIES)})")
    if not parts:
        raise argparse.ArgumentTypeError("empty granularity list")
    return parts


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text!r} outside the unsigned 64-bit range")
    return v


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected C,H,W") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gatedprune", description="Gate-driven structured pruning of convolutional networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate-spec", help="validate a catalog spec or spec JSON and print its shape table")
    v.add_argument("spec")
    v.add_argument("--input-shape", type=_shape)
    v.add_argument("--num-classes", type=int)
    v.add_argument("--granularities", type=_granularities, help="also insert shortcuts for these granularities")
    v.add_argument("--mismatch-policy", choices=("skip", "adapt"), default="skip")

    def run_flags(sp):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=_seed)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--granularities", type=_granularities)
        sp.add_argument("--keep-scaffold", type=_bool)
        sp.add_argument("--subset-per-class", type=int)

    run_flags(sub.add_parser("train", help="train the gated network only and save a checkpoint"))
    run_flags(sub.add_parser("prune", help="run the full train / search / cut / fine-tune protocol"))
    sw = sub.add_parser("sweep", help="run prune once per granularity subset")
    run_flags(sw)
    sw.add_argument("--sets", help="semicolon-separated subsets, e.g. 'filter;filter,layer'; default: all 15")

    r = sub.add_parser("report", help="print the table for a run directory or report.json")
    r.add_argument("path", type=Path)
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = str(args.out)
    if args.granularities is not None:
        over["granularities"] = args.granularities
    if args.keep_scaffold is not None:
        over["keep_scaffold"] = args.keep_scaffold
    if args.subset_per_class is not None:
        over["subset_per_class"] = args.subset_per_class
    return dataclasses.replace(cfg, **over) if over else cfg


def _all_subsets() -> list[list[str]]:
    return [list(c) for r in range(1, 5) for c in itertools.combinations(GRANULARITIES, r)]


def cmd_validate(args) -> int:
    spec = resolve_spec(args.spec, args.input_shape, args.num_classes)
    if args.granularities:
        spec = with_shortcuts(spec, [g for g in args.granularities if g != "filter"], args.mismatch_policy)
    print(shape_table(spec))
    print(f"params {count_params(spec)}  flops {count_flops(spec)}")
    skipped = spec.meta.get("skipped_sites") or {}
    for gran, sites in skipped.items():
        print(f"skipped {gran} sites ({len(sites)}): {', '.join(sites)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    train_full, test = load_data(cfg)
    train_ds, val = split_off(train_full, cfg.validation_fraction, cfg.seed)
    base = resolve_spec(cfg.spec, train_ds.sample_shape, train_ds.num_classes)
    spec = with_shortcuts(base, cfg.granularities, cfg.mismatch_policy)
    net = instantiate(spec, init_gates(spec, cfg.granularities, cfg.seed, cfg.gate_noise), cfg.seed)
    opt = SGD(cfg.momentum)
    hist = train(net, train_ds, TrainSettings.from_config(cfg, cfg.epochs, cfg.seed), cfg.sparsity(), val, optimizer=opt)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Checkpoint(spec, net.state_dict(), net.gate_list(), opt.state_dict(), cfg.epochs, hist).save(out / "gated.ckpt")
    print(json.dumps({"test_accuracy": accuracy(net, test), "checkpoint": str(out / "gated.ckpt")}, sort_keys=True))
    return 0


def cmd_prune(args) -> int:
    res = prune_pipeline(_config(args))
    print(res.report.table())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.sets:
        sets = [_granularities(s) for s in args.sets.split(";") if s.strip()]
    else:
        sets = _all_subsets()
    print(sweep(cfg, sets), end="")
    return 0


def cmd_report(args) -> int:
    path = args.path / "report.json" if args.path.is_dir() else args.path
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    d = json.loads(path.read_text())
    fields = {f.name for f in dataclasses.fields(CompressionReport)}
    print(CompressionReport(**{k: v for k, v in d.items() if k in fields}).table())
    return 0


COMMANDS = {"validate-spec": cmd_validate, "train": cmd_train, "prune": cmd_prune, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, argparse.ArgumentTypeError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DataError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return 2
    except (SpecError, KeyError) as e:
        print(f"error: spec: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: pipeline: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
