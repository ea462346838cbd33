#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    imbalanced-supcon gen-data --config c.json --out runs/
    imbalanced-supcon train --config c.json --out runs/
    imbalanced-supcon metrics --embeddings runs/<run_id>/embeddings.csv
    imbalanced-supcon probe runs/<run_id>
    imbalanced-supcon verify-bound --config c.json
    imbalanced-supcon sweep --axis imbalance --values 0.5,0.1,0.05,0.01 --seeds 0,1,2
    imbalanced-supcon sweep --default-grid --workers 4
    imbalanced-supcon correlate runs/sweep.csv
    imbalanced-supcon export-embeddings runs/<run_id>

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 failed bound verification.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from imbalanced_supcon import __version__
from imbalanced_supcon.config import RunConfig, default_log_level, default_out_dir, load_config
from imbalanced_supcon.data import generate_blobs, save_dataset_csv
from imbalanced_supcon.encoder import forward, load_checkpoint
from imbalanced_supcon.errors import (BoundViolation, InvalidConfig, NumericalDivergence,
                                      PremiseViolated, SupconError)
from imbalanced_supcon.metrics import MetricReport, full_report
from imbalanced_supcon.sphere import STREAM_DATA, STREAM_EVAL, EmbeddingBatch, RngStream
from imbalanced_supcon.sweep import DEFAULT_GRID, DEFAULT_SEEDS, correlate, sweep, sweep_grid
from imbalanced_supcon.theory import verify_bound
from imbalanced_supcon.trainer import Trainer, build_data, export_embeddings, run_probe, write_run
from imbalanced_supcon.utils import ResultsIO

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_BOUND = 4

_quiet = False


def echo(message: str = ""):
    if not _quiet:
        print(message)


def banner(title: str):
    echo("=" * 70)
    echo(title)
    echo("=" * 70)


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out:
        config.out_dir = args.out
    return config.validate()


def _print_metrics(report: MetricReport):
    echo(f"  SAD: {report.sad:.4f}")
    echo(f"  SAA: {report.saa:.4f}")
    echo(f"  CAD: {report.cad:.4f}")
    echo(f"  CAC: {report.cac:.4f}  (label-mix baseline {report.label_mix_baseline():.4f}, "
         f"r = {report.r_count} of {report.n_views} views)")
    echo(f"  GPU: {report.gpu:.4f}")
    echo(f"  Mean cosine: {report.mean_cosine:.4f}")


def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    data = config.data
    ds = generate_blobs(data.n, data.imbalance, data.input_dim, data.separation, data.spread,
                        RngStream(config.seeds.data, STREAM_DATA), data.minority_label)
    target = Path(args.output) if args.output else Path(config.out_dir) / "dataset.csv"
    save_dataset_csv(ds, target)
    majority, minority = (ds.class_counts()[ds.majority_label],
                          ds.class_counts()[ds.minority_label])
    echo(f"Generated {len(ds)} samples ({minority} minority, {majority} majority) in R^{ds.input_dim}")
    echo(f"Saved dataset to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    banner("Supervised Contrastive Training")
    echo(f"Run ID: {config.run_id}")
    echo(f"Loss: {config.loss.kind} (tau={config.loss.tau})")
    echo(f"Encoder: {config.encoder.backend}, d={config.encoder.dim}, init={config.encoder.init}")
    echo(f"Data: N={config.data.n}, minority share={config.data.imbalance}")
    echo(f"Epochs: {config.optimizer.epochs}, batch size: {config.optimizer.batch_size}")
    echo("=" * 70)

    try:
        record = Trainer(config).run()
    except NumericalDivergence as e:
        dump_path = Path(config.out_dir) / f"divergence_{config.run_id}.json"
        ResultsIO.save_json({"run_id": config.run_id, "message": str(e), "dump": e.dump}, dump_path)
        echo(f"ERROR: {e}")
        echo(f"Saved divergence dump to {dump_path}")
        return EXIT_DIVERGENCE

    run_dir = write_run(record, config.out_dir)
    echo("\nFinal metrics:")
    _print_metrics(record.metrics)
    echo("\nLinear probe:")
    echo(f"  Balanced accuracy: {record.probe.balanced_accuracy:.4f}")
    echo(f"  AUC: {record.probe.auc:.4f}")
    echo(f"\nCollapsed: {'yes' if record.collapse.collapsed else 'no'}")
    if record.bound is not None:
        echo(f"Bound at init: epsilon={record.bound.epsilon:.4f}, "
             f"all satisfied: {record.bound.all_satisfied}")
    echo(f"\nSaved run to {run_dir}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    config = _resolve_config(args)
    path = args.embeddings or config.metrics.embeddings_path
    if not path:
        raise InvalidConfig("metrics needs --embeddings or metrics.embeddings_path in the config")
    data = ResultsIO.read_embeddings_csv(path)
    rng = RngStream(config.seeds.augment, STREAM_EVAL) if config.metrics.tie_break == "random" else None
    report = full_report(data["z"], data["labels"], data["partner"], config.metrics.r_fraction,
                         config.metrics.tie_break, rng)
    banner(f"Metrics for {path}")
    _print_metrics(report)
    if args.output:
        ResultsIO.save_json(report.to_dict(), args.output)
        echo(f"\nSaved metrics to {args.output}")
    return EXIT_OK


def cmd_probe(args) -> int:
    run_dir = Path(args.run_dir)
    config = RunConfig.from_dict(ResultsIO.load_json(run_dir / "config.json")).validate()
    params = load_checkpoint(run_dir / "checkpoint.json")
    result = run_probe(config, params, build_data(config))
    banner(f"Linear probe for {run_dir}")
    echo(f"  Train samples: {result.train_size}, test samples: {result.test_size}")
    echo(f"  Balanced accuracy: {result.balanced_accuracy:.4f}")
    echo(f"  AUC: {result.auc:.4f}")
    target = ResultsIO.save_json(result.to_dict(), run_dir / "probe.json")
    echo(f"\nSaved probe result to {target}")
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    config = _resolve_config(args)
    if args.embeddings:
        data = ResultsIO.read_embeddings_csv(args.embeddings)
        embeddings, labels = EmbeddingBatch.from_unit(data["z"]), data["labels"]
        source = args.embeddings
    else:
        trainer = Trainer(config)
        batch = trainer.draw_batch()
        embeddings, labels = forward(trainer.params, batch), batch.labels
        source = f"first batch at {config.encoder.init} init"

    evaluation = verify_bound(embeddings, labels, config.loss.tau, config.metrics.epsilon_max,
                              strict=args.strict)
    banner(f"Gradient bound check ({source})")
    echo(f"epsilon = {evaluation.epsilon:.4f}, tau = {evaluation.tau}")
    if evaluation.premise_violated:
        echo(f"WARNING: epsilon exceeds the near-collapse premise ({evaluation.epsilon_max})")
    if args.table:
        echo(evaluation.format_table())
    echo(f"Majority mean grad norm: {evaluation.mean_grad_norm(1 - config.data.minority_label):.4e}")
    echo(f"Minority mean grad norm: {evaluation.mean_grad_norm(config.data.minority_label):.4e}")
    echo(f"Proof-final bound satisfied by all anchors: {evaluation.all_satisfied}")
    echo(f"Theorem-form bound satisfied by all anchors: {evaluation.all_satisfied_theorem}")

    target = Path(args.output) if args.output else Path(config.out_dir) / "bound.json"
    ResultsIO.save_json(evaluation.to_dict(), target)
    echo(f"Saved bound evaluation to {target}")
    if not evaluation.all_satisfied:
        raise BoundViolation(f"{int(np.sum(evaluation.slack() < 0))} anchors exceed the bound")
    return EXIT_OK


def _split_values(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    config = _resolve_config(args)
    seeds = [int(s) for s in _split_values(args.seeds)] if args.seeds else list(DEFAULT_SEEDS)
    if args.default_grid:
        axes = {axis: list(values) for axis, values in DEFAULT_GRID.items()}
        result = sweep_grid(config, axes, seeds, config.out_dir, args.workers)
    else:
        if not args.axis or not args.values:
            raise InvalidConfig("sweep needs --axis and --values, or --default-grid")
        axes = {args.axis: _split_values(args.values)}
        result = sweep(config, args.axis, axes[args.axis], seeds, config.out_dir, args.workers)

    banner(f"Sweep over {', '.join(axes)}")
    echo(f"Completed: {len(result.completed)}, skipped (already done): {len(result.skipped)}, "
         f"failed: {len(result.failed)}")
    for group in result.summary["groups"]:
        probe = group["probe_metric"]
        if probe["mean"] is None:
            echo(f"  {group['point']}: no completed runs")
            continue
        echo(f"  {group['point']}: probe {probe['mean']:.4f} +/- {probe['std']:.4f}, "
             f"cac {group['cac']['mean']:.4f}, saa {group['saa']['mean']:.4f} "
             f"({group['n_runs']} runs)")
    echo(f"\nSaved sweep rows to {result.csv_path}")
    echo(f"Saved summary to {result.summary_path}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    csv_path = Path(args.csv) if args.csv else Path(args.out or default_out_dir()) / "sweep.csv"
    report = correlate(csv_path, args.output)
    banner(f"Metric vs probe correlation ({report['n_rows']} rows)")
    echo(f"{'metric':>8} {'R^2':>8} {'kendall':>8}")
    for metric, scores in report["metrics"].items():
        echo(f"{metric:>8} {scores['r2']:>8.4f} {scores['kendall_tau']:>8.4f}")
    echo(f"\nSaved correlation report to {args.output or csv_path.parent / 'correlation.json'}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    target = export_embeddings(args.run_dir, args.output)
    echo(f"Saved embeddings to {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="Seed applied to every random stream")
    common.add_argument("--out", help="Output directory (default SUPCON_OUT_DIR or runs)")
    common.add_argument("--quiet", action="store_true", help="Only print warnings and errors")

    parser = argparse.ArgumentParser(
        prog="imbalanced-supcon",
        description="Supervised contrastive learning on imbalanced binary data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Write the synthetic dataset as CSV")
    p.add_argument("--output", help="CSV path (default <out>/dataset.csv)")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Train one configuration")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("metrics", parents=[common], help="Metrics of an embeddings file")
    p.add_argument("--embeddings", help="Embeddings CSV (view_id,sample_id,label,z0..)")
    p.add_argument("--output", help="Write the MetricReport JSON here")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("probe", parents=[common], help="Re-run the linear probe of a stored run")
    p.add_argument("run_dir", help="Run directory with config.json and checkpoint.json")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("verify-bound", parents=[common], help="Check the gradient bound")
    p.add_argument("--embeddings", help="Embeddings CSV; default is the first batch at init")
    p.add_argument("--strict", action="store_true", help="Fail when the batch is not near-collapsed")
    p.add_argument("--table", action="store_true", help="Print the per-anchor table")
    p.add_argument("--output", help="Bound JSON path (default <out>/bound.json)")
    p.set_defaults(handler=cmd_verify_bound)

    p = sub.add_parser("sweep", parents=[common], help="Run a parameter sweep")
    p.add_argument("--axis", help="imbalance | temperature | batch-size | supervision-fraction | loss-kind")
    p.add_argument("--values", help="Comma-separated axis values")
    p.add_argument("--seeds", help="Comma-separated seeds (default 0,1,2)")
    p.add_argument("--default-grid", action="store_true",
                   help="Loss kind x imbalance grid over three seeds")
    p.add_argument("--workers", type=int, help="Worker processes (default SUPCON_WORKERS)")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("correlate", parents=[common], help="Correlate metrics with the probe metric")
    p.add_argument("csv", nargs="?", help="Sweep CSV (default <out>/sweep.csv)")
    p.add_argument("--output", help="Report path (default correlation.json beside the CSV)")
    p.set_defaults(handler=cmd_correlate)

    p = sub.add_parser("export-embeddings", parents=[common],
                       help="Rebuild a run's embeddings for external projection tools")
    p.add_argument("run_dir", help="Run directory with config.json and checkpoint.json")
    p.add_argument("--output", help="CSV path (default <run_dir>/embeddings.csv)")
    p.set_defaults(handler=cmd_export_embeddings)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    global _quiet
    args = build_parser().parse_args(argv)
    _quiet = args.quiet
    level = "WARNING" if args.quiet else default_log_level()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except NumericalDivergence as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (BoundViolation, PremiseViolated) as e:
        print(f"Bound verification failed: {e}", file=sys.stderr)
        return EXIT_BOUND
    except SupconError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
