"""Command-line entry point.

Subcommands: train, sweep, verify, emd-check, finetune, data gen. Science
parameters live in the config file; the CLI adds only operational knobs
(paths, worker count, quick mode). FEDEMD_LOG controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import ExperimentConfig, load_config
from .data import generate_synthetic, holdout_split, load_manifest, save_manifest
from .errors import ConfigError, FedemdError
from .federation import run_training
from .finetune import finetune_compare
from .metrics import validate_rounds_monotone, write_metrics
from .model import evaluate
from .seeding import derive_seed
from .verify import format_report, run_emd_suite, run_grad_suite, run_protocol_suite

log = logging.getLogger("fedemd")

VARIANTS = ("fedemd", "no_emd", "no_distill", "cfl")


def _setup_logging() -> None:
    level = os.environ.get("FEDEMD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _apply_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    fed = replace(
        cfg.federation,
        no_emd_weighting=variant == "no_emd",
        no_distillation=variant == "no_distill",
        cfl_averaging=variant == "cfl",
    )
    return replace(cfg, federation=fed)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    log.info("starting run: variant=%s seed=%d silos=%d rounds=%d",
             cfg.variant(), cfg.seed, cfg.silos, cfg.rounds)
    result = run_training(cfg, workers=args.workers, run_dir=out)
    validate_rounds_monotone(result.metrics)
    write_metrics(out / "metrics.jsonl", result.metrics)
    Checkpoint.from_weights(result.theta, cfg.digest_bytes()).save(out / "theta.fefm")
    final_acc = evaluate(result.theta, result.eval_data.images, result.eval_data.labels)
    silo_accs = [
        evaluate(w, result.eval_data.images, result.eval_data.labels)
        for w in result.silo_weights
    ]
    print(f"run complete: {cfg.variant()} seed={cfg.seed} rounds={cfg.rounds}")
    print(f"  global model accuracy : {final_acc:.4f}")
    print(f"  mean silo accuracy    : {np.mean(silo_accs):.4f}")
    print(f"  weight transfers      : {result.bus.weight_transfers}")
    print(f"  artifacts             : {out}/config_echo.json, metrics.jsonl, theta.fefm")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    grid = [float(p) for p in args.grid.split(",")]
    for p in grid:
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"sweep fraction {p} outside [0, 1]")
    rows = []
    for p in grid:
        for variant in VARIANTS:
            run_cfg = _apply_variant(
                replace(cfg, data=replace(cfg.data, unseen_fraction=p)), variant
            )
            result = run_training(run_cfg, workers=args.workers)
            # deployed-model metric: mean silo accuracy on the global eval set
            acc = float(np.mean([
                evaluate(w, result.eval_data.images, result.eval_data.labels)
                for w in result.silo_weights
            ]))
            rows.append((p, variant, acc))
            print(f"  p={p:.2f} {variant:<10} accuracy={acc:.4f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("p,variant,accuracy\n")
        for p, variant, acc in rows:
            fh.write(f"{p},{variant},{acc}\n")
    print(f"sweep written to {out} ({len(rows)} rows)")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    suites = []
    if args.suite in ("emd", "all"):
        n = 200 if args.quick else 1000
        suites.append(run_emd_suite(instances=n))
    if args.suite in ("grad", "all"):
        pc, ii = (20, 20) if args.quick else (100, 200)
        suites.append(run_grad_suite(primitive_cases=pc, implicit_instances=ii))
    if args.suite in ("protocol", "all"):
        suites.append(run_protocol_suite())
    ok = True
    for report in suites:
        print(format_report(report))
        ok = ok and report.ok
    return 0 if ok else 1


def cmd_emd_check(args: argparse.Namespace) -> int:
    n = 200 if args.quick else 1000
    pc, ii = (20, 20) if args.quick else (100, 200)
    reports = [run_emd_suite(instances=n),
               run_grad_suite(primitive_cases=pc, implicit_instances=ii)]
    ok = True
    for report in reports:
        print(format_report(report))
        ok = ok and report.ok
    return 0 if ok else 1


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    theta = Checkpoint.load(args.checkpoint).to_weights()
    if cfg.data.manifest is not None:
        full = load_manifest(cfg.data.manifest)
        train, test = holdout_split(full, cfg.data.eval_fraction,
                                    derive_seed("downstream", cfg.seed))
    else:
        train = generate_synthetic(
            cfg.data.classes, cfg.data.per_class, cfg.data.side, cfg.data.noise,
            seed=derive_seed("downstream-train", cfg.seed),
        )
        test = generate_synthetic(
            cfg.data.classes, cfg.data.eval_per_class, cfg.data.side, cfg.data.noise,
            seed=derive_seed("downstream-eval", cfg.seed),
        )
    report = finetune_compare(
        theta, train, test,
        steps=args.steps, alpha=args.alpha, batch_size=cfg.data.batch, seed=cfg.seed,
    )
    print(f"fine-tuned backbone accuracy : {report.finetuned_accuracy:.4f}")
    print(f"from-scratch accuracy        : {report.scratch_accuracy:.4f}")
    print(f"delta                        : {report.delta:+.4f}")
    return 0


def cmd_data_gen(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg.data.manifest is not None:
        raise ConfigError("data gen needs a synthetic data section, not a manifest")
    dataset = generate_synthetic(
        cfg.data.classes, cfg.data.per_class, cfg.data.side, cfg.data.noise,
        seed=derive_seed("train-data", cfg.seed),
    )
    manifest = save_manifest(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {manifest.parent} (manifest: {manifest})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedemd",
        description="Decentralized federated distillation with transport-based teacher weighting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--workers", type=int, default=1)
    p_train.set_defaults(fn=cmd_train)

    p_sweep = sub.add_parser("sweep", help="unseen-fraction sweep over all variants")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", default="0,0.5,1", help="comma-separated fractions")
    p_sweep.add_argument("--out", required=True, help="CSV output path")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run a verification suite")
    p_verify.add_argument("suite", choices=("emd", "grad", "protocol", "all"))
    p_verify.add_argument("--quick", action="store_true")
    p_verify.set_defaults(fn=cmd_verify)

    p_check = sub.add_parser("emd-check", help="oracle-equivalence and gradient suites")
    p_check.add_argument("--quick", action="store_true")
    p_check.set_defaults(fn=cmd_emd_check)

    p_ft = sub.add_parser("finetune", help="transfer check for a checkpoint")
    p_ft.add_argument("--checkpoint", required=True)
    p_ft.add_argument("--config", required=True)
    p_ft.add_argument("--steps", type=int, default=150)
    p_ft.add_argument("--alpha", type=float, default=0.1)
    p_ft.set_defaults(fn=cmd_finetune)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_gen = data_sub.add_parser("gen", help="materialize a synthetic dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=cmd_data_gen)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedemdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
