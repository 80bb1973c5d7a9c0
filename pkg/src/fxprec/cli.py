"""Command-line front end.

Subcommands::

    fxprec assign        --stats S (--bmin N | --sweep-bmin) [--gamma-min G] [--out CONFIG]
    fxprec verify-paper  [--golden-dir D] [--networks ...]
    fxprec cost          --descriptor D (--config C | --fl) [--out REPORT]
    fxprec train         --descriptor D (--config C | --fl) [--dataset CSV] [--compare] [--out DIR]
    fxprec perturb       --config C --mode {uniform,fraction,type} [--sign ±1] [--out CONFIG]

Exit status: 0 on success, 1 when a requested verification fails or the
computation is impossible, 2 on malformed input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .assigner import (
    BMIN_RANGE,
    DEFAULT_BETA0,
    DEFAULT_ETA0,
    DEFAULT_PM_TARGET,
    TENSOR_TYPES,
    build_config,
    config_to_dict,
    feedforward_offsets,
    format_config_table,
    load_config,
    perturb_config,
    save_config,
    sweep_bmin,
    verify_criteria,
)
from .costs import cost_report, format_cost_table, load_descriptor
from .errors import AssignmentError, FxError, SchemaError
from .golden import NETWORKS, verify_paper
from .stats import load_stats
from .study import assign_from_run, run_comparison
from .trainkit import TrainSettings, load_csv_dataset, make_blobs, train

logger = logging.getLogger("fxprec")

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA = 0, 1, 2


@dataclass
class RunManifest:
    """Everything a command run depends on, validated up front."""

    command: str
    inputs: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    pm_target: float = DEFAULT_PM_TARGET
    beta0: float = DEFAULT_BETA0
    eta0: float = DEFAULT_ETA0
    gamma_min: float | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def validate(self):
        for role, path in self.inputs.items():
            if not Path(path).exists():
                raise SchemaError(f"{role} file not found", path)
        for name in ("pm_target", "beta0", "eta0"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise SchemaError(f"--{name.replace('_', '-')} must lie in (0, 1), got {v}")
        if self.gamma_min is not None and not self.gamma_min > 0:
            raise SchemaError(f"--gamma-min must be positive, got {self.gamma_min}")
        return self


def _manifest(args, **inputs) -> RunManifest:
    return RunManifest(
        command=args.command,
        inputs={k: str(v) for k, v in inputs.items() if v is not None},
        seed=getattr(args, "seed", 0),
        pm_target=getattr(args, "pm_target", DEFAULT_PM_TARGET),
        beta0=getattr(args, "beta0", DEFAULT_BETA0),
        eta0=getattr(args, "eta0", DEFAULT_ETA0),
        gamma_min=getattr(args, "gamma_min", None),
        outputs={"out": str(args.out)} if getattr(args, "out", None) else {},
    ).validate()


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- assign -------------------------------------------------------------------


def cmd_assign(args) -> int:
    m = _manifest(args, stats=args.stats)
    snaps: list[str] = []
    stats = load_stats(args.stats, snaps)
    for s in snaps:
        print(f"snap: {s}", file=sys.stderr)
    gamma_min = m.gamma_min if m.gamma_min is not None else stats.gamma_min
    if gamma_min is None:
        raise SchemaError("no --gamma-min given and the stats file has no 'gamma_min'")
    if args.sweep_bmin:
        if not stats.pm_curve:
            raise SchemaError("--sweep-bmin needs a 'pm_curve' in the stats file", "pm_curve")
        off_w, off_a, _ = feedforward_offsets(
            [s.e_w for s in stats.layers], [s.e_a for s in stats.feedforward_layers]
        )
        base = min(off_w + off_a)

        def pm_eval(b_w, b_a):
            b = min(b_w + b_a) - base
            if b not in stats.pm_curve:
                raise AssignmentError(f"pm_curve has no entry for B_min={b}")
            return stats.pm_curve[b]

        b_min = sweep_bmin(off_w, off_a, pm_eval, m.pm_target, *BMIN_RANGE)
    else:
        b_min = args.bmin if args.bmin is not None else stats.b_min
        if b_min is None:
            raise SchemaError("no --bmin given and the stats file has no 'b_min'")
    config = build_config(stats, b_min, gamma_min, m.pm_target)
    report = verify_criteria(config, stats, m.pm_target, m.beta0, m.eta0)
    table = format_config_table(config)
    lines = [table, "criteria:"]
    for r in report.results:
        state = {True: "pass", False: "FAIL", None: "n/a"}[r.passed]
        lines.append(f"  {r.name:<5} {state}" + (f"  ({r.detail})" if r.detail else ""))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_config(config, out)
        _write(out.with_suffix(".table.txt"), table)
        _write(out.with_suffix(".criteria.json"), _dumps(report.to_dict()))
    return EXIT_FAIL if any(r.passed is False for r in report.results) else EXIT_OK


# -- verify-paper ---------------------------------------------------------------


def cmd_verify_paper(args) -> int:
    verdict = verify_paper(args.golden_dir, args.networks or NETWORKS)
    sys.stdout.write(verdict.format())
    if args.out:
        doc = {
            v.network: {
                "status": v.status,
                "cells": v.cells,
                "mismatches": [asdict(c) for c in v.mismatches],
                "whitelisted": [asdict(c) for c in v.whitelisted],
                "snaps": v.snaps,
            }
            for v in verdict.networks
        }
        _write(args.out, _dumps(doc))
    return EXIT_OK if verdict.passed else EXIT_FAIL


# -- cost -----------------------------------------------------------------------


def cmd_cost(args) -> int:
    _manifest(args, descriptor=args.descriptor, config=args.config)
    desc = load_descriptor(args.descriptor)
    fl = cost_report(desc, None)
    if args.fl:
        fx, ref = fl, None
    else:
        fx, ref = cost_report(desc, load_config(args.config)), fl
    sys.stdout.write(format_cost_table(fx, ref))
    if args.out:
        doc = {"fx": asdict(fx)} if ref is not None else {}
        doc["fl"] = asdict(fl)
        _write(args.out, _dumps(doc))
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def _dataset(args, sizes):
    if args.dataset:
        return lambda seed: load_csv_dataset(args.dataset, seed)
    return lambda seed: make_blobs(seed, num_classes=sizes[-1], dim=sizes[0])


def cmd_train(args) -> int:
    m = _manifest(args, descriptor=args.descriptor, config=args.config, dataset=args.dataset)
    desc = load_descriptor(args.descriptor)
    if not desc.dense_sizes:
        raise SchemaError("training needs a descriptor with 'dense_sizes'")
    sizes = desc.dense_sizes
    settings = TrainSettings(
        epochs=args.epochs,
        batch_size=desc.batch_size or TrainSettings.batch_size,
        lr_max=args.lr_max,
        lr_min=args.lr_min,
    )
    factory = _dataset(args, sizes)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "manifest.json", _dumps(asdict(m)))

    def sink(log):
        if out:
            log.dump(out / f"{log.label}-seed{log.seed}.jsonl")
        if log.aborted:
            print(f"run {log.label} (seed {log.seed}) aborted: {log.aborted}", file=sys.stderr)

    if args.compare:
        seeds = list(range(args.seed, args.seed + args.num_seeds))
        result = run_comparison(seeds, sizes, settings, factory, m.pm_target, log_sink=sink)
        sys.stdout.write(result.format())
        if out:
            _write(out / "comparison.json", _dumps(result.summary()))
        return EXIT_FAIL if result.aborted else EXIT_OK

    data = factory(args.seed)
    config = None if args.fl else load_config(args.config)
    reference = None
    if config is not None and args.pair:
        reference = train(sizes, data, None, args.seed, settings, label="FL")
        sink(reference)
    log = train(sizes, data, config, args.seed, settings, reference, label="FL" if args.fl else "FX")
    sink(log)
    sys.stdout.write(log.to_jsonl() if not out else "")
    if log.records:
        print(f"final test error: {100 * log.final_test_error:.2f}%", file=sys.stderr)
    if args.fl and args.stats_out and not log.aborted:
        stats, config = assign_from_run(log, data, m.pm_target, settings.lr_min)
        stats.dump(args.stats_out)
    return EXIT_FAIL if log.aborted else EXIT_OK


# -- perturb --------------------------------------------------------------------


def cmd_perturb(args) -> int:
    _manifest(args, config=args.config)
    config = load_config(args.config)
    new = perturb_config(config, args.mode, args.sign, args.fraction, args.tensor_type, args.seed)
    sys.stdout.write(format_config_table(new))
    if args.out:
        save_config(new, args.out)
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def _thresholds(p):
    p.add_argument("--pm-target", type=float, default=DEFAULT_PM_TARGET, help="mismatch target (default 0.01)")
    p.add_argument("--beta0", type=float, default=DEFAULT_BETA0, help="clipping-rate bound (default 0.05)")
    p.add_argument("--eta0", type=float, default=DEFAULT_ETA0, help="relative-bias bound (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fxprec", description="Per-tensor fixed-point precision planning for training.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assign", help="build a precision configuration from a statistics file")
    p.add_argument("--stats", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--bmin", type=int)
    g.add_argument("--sweep-bmin", action="store_true", help="pick B_min from the stats file's pm_curve")
    p.add_argument("--gamma-min", type=float)
    _thresholds(p)
    p.add_argument("--out", help="config JSON path (table and criteria are written next to it)")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("verify-paper", help="regress the assigner against the bundled reference tables")
    p.add_argument("--golden-dir", help="directory of bundles (default: the packaged set)")
    p.add_argument("--networks", nargs="+", choices=NETWORKS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_paper)

    p = sub.add_parser("cost", help="cost metrics of a configuration")
    p.add_argument("--descriptor", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--fl", action="store_true", help="32-bit floating-point baseline only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="train a dense network on the synthetic task or a CSV dataset")
    p.add_argument("--descriptor", required=True)
    p.add_argument("--dataset", help="CSV file (features..., label); default: synthetic blobs")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--fl", action="store_true")
    g.add_argument("--compare", action="store_true", help="FL, C_o, C+1, C-1 and per-type -1 runs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-seeds", type=int, default=1, help="seeds for --compare")
    p.add_argument("--epochs", type=int, default=TrainSettings.epochs)
    p.add_argument("--lr-max", type=float, default=TrainSettings.lr_max)
    p.add_argument("--lr-min", type=float, default=TrainSettings.lr_min)
    p.add_argument("--pair", action="store_true", help="also train the FL twin and log p_m")
    p.add_argument("--stats-out", help="with --fl: write the collected statistics for 'assign'")
    _thresholds(p)
    p.add_argument("--out", help="directory for JSONL logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("perturb", help="shift a configuration's precisions by one bit")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("uniform", "fraction", "type"), required=True)
    p.add_argument("--sign", type=int, choices=(1, -1), default=1)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--tensor-type", choices=TENSOR_TYPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_perturb)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
