"""Command-line interface.

Diagnostics go to stderr via logging; data products go to files inside the
run directory (or paths given with ``--out``).  ``report`` is the one
command whose product is human-readable text on stdout.  Exit codes: 0 on
success, 1 on any expected failure (bad input, corrupt artifact, locked
run), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import _backend, runs
from .affinity import AffinityMatrix, affinity_grid, write_affinity, write_log_snr_axis
from .clustering import solve, write_clustering
from .config import load_config
from .denoiser import load_checkpoint
from .errors import MtldiffError
from .evaluate import (NTG_DEFAULT_SAMPLES, NTG_DEFAULT_STEPS, ddim_sample, ntg,
                       ntg_intervals)
from .schedule import NoiseSchedule
from .training import (Trainer, build_cost, dataset_for_config, probe_for_config,
                       snapshot_gradients, snapshot_noise_seed, train_specialist)

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "MTLDIFF_RUN_ROOT"
SAMPLES_MAGIC = "MTLDIFF-SAMPLES"
SAMPLES_VERSION = "v1"
NTG_MAGIC = "MTLDIFF-NTG"
NTG_VERSION = 1


def resolve_run_dir(arg: str | None) -> Path | None:
    """Resolve --run-dir, prefixing relative paths with $MTLDIFF_RUN_ROOT."""
    if arg is None:
        return None
    path = Path(arg)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _resolve_out(out: str, run_dir: Path | None) -> Path:
    path = Path(out)
    if run_dir is not None and not path.is_absolute():
        return run_dir / path
    return path


def _load_effective_config(args):
    cfg, raw = load_config(args.config)
    if args.seed_override is not None:
        cfg = replace(cfg, seed=args.seed_override)
    return cfg, raw


def _schedule_for(cfg) -> NoiseSchedule:
    return NoiseSchedule.linear(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                cfg.schedule.beta_end)


def cmd_train(args) -> int:
    cfg, raw = _load_effective_config(args)
    run_dir = resolve_run_dir(args.run_dir)
    trainer = Trainer(cfg, run_dir=run_dir, config_raw=raw, resume=args.resume)
    model, state = trainer.run(halt_after=args.halt_after)
    log.info("finished at step %d (loss stream in %s)", state.step,
             run_dir / runs.METRICS_FILE)
    return 0


def cmd_cluster(args) -> int:
    cfg, _ = _load_effective_config(args)
    schedule = _schedule_for(cfg)
    run_dir = resolve_run_dir(args.run_dir)
    base = run_dir if run_dir is not None else Path.cwd()
    cost = build_cost(cfg, schedule, base_dir=base)
    clustering = solve(cost, cfg.clustering.clusters, cfg.clustering.min_size,
                       cfg.clustering.max_size)
    out = _resolve_out(args.out, run_dir)
    write_clustering(out, clustering, cost)
    log.info("wrote %d intervals (total cost %.6g) to %s",
             clustering.k, clustering.total_cost, out)
    return 0


def cmd_affinity(args) -> int:
    cfg, _ = _load_effective_config(args)
    schedule = _schedule_for(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = dataset_for_config(cfg)
    probe = probe_for_config(cfg, dataset)
    matrix = AffinityMatrix.empty(schedule.T, affinity_grid(schedule.T, cfg.affinity.stride))
    for index in range(args.snapshots):
        grads = snapshot_gradients(ckpt.model, schedule, probe,
                                   noise_seed=snapshot_noise_seed(cfg, index),
                                   timesteps=matrix.timesteps)
        matrix.accumulate(grads)
    run_dir = resolve_run_dir(args.run_dir)
    base = _resolve_out(args.out, run_dir)
    write_affinity(base, matrix)
    write_log_snr_axis(Path(f"{base}.logsnr.csv"), schedule, matrix.timesteps)
    log.info("wrote %d-snapshot affinity over %d timesteps to %s.csv",
             matrix.snapshots, matrix.timesteps.size, base)
    return 0


def cmd_sample(args) -> int:
    cfg, _ = _load_effective_config(args)
    schedule = _schedule_for(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    samples = ddim_sample(ckpt.model, schedule, args.steps, args.count, cfg.seed)
    run_dir = resolve_run_dir(args.run_dir)
    out = _resolve_out(args.out, run_dir)
    with open(out, "w", encoding="ascii") as f:
        f.write(f"# {SAMPLES_MAGIC} {SAMPLES_VERSION}\n")
        f.write("x0,x1\n")
        for row in samples:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    log.info("wrote %d samples (%d sampler steps) to %s", args.count, args.steps, out)
    return 0


def cmd_ntg(args) -> int:
    cfg, _ = _load_effective_config(args)
    schedule = _schedule_for(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    ref = dataset_for_config(cfg)
    if args.intervals:
        intervals = []
        for part in args.intervals.split(","):
            lo, _, hi = part.partition(":")
            intervals.append((int(lo), int(hi)))
    else:
        intervals = list(ntg_intervals(schedule.T))
    budget_steps = max(1, round(args.budget * cfg.iterations))
    reports = []
    for interval in intervals:
        log.info("training specialist for [%d, %d] (%d steps)",
                 interval[0], interval[1], budget_steps)
        specialist = train_specialist(cfg, interval, iterations=budget_steps)
        report = ntg(ckpt.model, specialist, interval, schedule, ref,
                     n_steps=args.steps, n_samples=args.count, seed=cfg.seed)
        log.info("interval [%d, %d]: gap %.6g", interval[0], interval[1], report.ntg)
        reports.append(asdict(report))
    doc = {
        "format": NTG_MAGIC,
        "version": NTG_VERSION,
        "seed": cfg.seed,
        "specialist_budget": args.budget,
        "specialist_iterations": budget_steps,
        "reports": reports,
    }
    run_dir = resolve_run_dir(args.run_dir)
    out = _resolve_out(args.out, run_dir)
    with open(out, "w", encoding="ascii") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    log.info("wrote %d interval reports to %s", len(reports), out)
    return 0


def cmd_report(args) -> int:
    run_dir = resolve_run_dir(args.run_dir)
    manifest = runs.load_manifest(run_dir)
    lines = [
        f"run directory: {run_dir}",
        f"status: {manifest.status}",
        f"seed: {manifest.seed}",
        f"iterations done: {manifest.iterations_done}",
        f"config sha256: {manifest.config_sha256}",
    ]
    snapshot = run_dir / runs.CONFIG_SNAPSHOT
    if snapshot.exists():
        cfg, _ = load_config(snapshot)
        lines.append(f"combination: aggregator={cfg.aggregator.method} "
                     f"clustering={cfg.clustering.cost} k={cfg.clustering.clusters}")
    metrics_path = run_dir / runs.METRICS_FILE
    if metrics_path.exists():
        records = runs.read_metrics(metrics_path)
        if records:
            last = records[-1]
            lines.append(f"metrics records: {len(records)}")
            lines.append(f"last step: {last.get('step')} loss {last.get('loss'):.6g}")
    for kind, entry in sorted(manifest.artifacts.items()):
        lines.append(f"artifact {kind}: {entry}")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--quiet", action="store_true",
                        help="only warnings and errors on stderr")
    shared.add_argument("--seed-override", type=int, default=None, metavar="N",
                        help="replace the config seed for this invocation")
    shared.add_argument("--backend", choices=("auto", "python", "compiled"),
                        default=None, help="kernel implementation to use")
    shared.add_argument("--run-dir", default=None, metavar="DIR",
                        help=f"run directory (relative paths resolve under ${RUN_ROOT_ENV})")

    parser = argparse.ArgumentParser(
        prog="mtldiff",
        description="Multi-task diffusion training on 2-D toy data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="train a model into a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--halt-after", type=int, default=None, metavar="N",
                   help="stop after N total steps (resumable)")
    p.set_defaults(func=cmd_train, needs_run_dir=True)

    p = sub.add_parser("cluster", parents=[shared], help="solve and write the timestep partition")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="clusters.txt")
    p.set_defaults(func=cmd_cluster, needs_run_dir=False)

    p = sub.add_parser("affinity", parents=[shared],
                       help="measure timestep affinity from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="affinity")
    p.add_argument("--snapshots", type=int, default=1)
    p.set_defaults(func=cmd_affinity, needs_run_dir=False)

    p = sub.add_parser("sample", parents=[shared], help="draw samples from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--steps", type=int, default=NTG_DEFAULT_STEPS)
    p.add_argument("--count", type=int, default=NTG_DEFAULT_SAMPLES)
    p.set_defaults(func=cmd_sample, needs_run_dir=False)

    p = sub.add_parser("ntg", parents=[shared],
                       help="negative-transfer gaps against interval specialists")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="ntg.json")
    p.add_argument("--budget", type=float, default=0.6,
                   help="specialist training budget as a fraction of config iterations")
    p.add_argument("--steps", type=int, default=NTG_DEFAULT_STEPS)
    p.add_argument("--count", type=int, default=NTG_DEFAULT_SAMPLES)
    p.add_argument("--intervals", default=None, metavar="L:R,L:R,...",
                   help="explicit measurement intervals (default: five even spans)")
    p.set_defaults(func=cmd_ntg, needs_run_dir=False)

    p = sub.add_parser("report", parents=[shared], help="summarise a run directory")
    p.set_defaults(func=cmd_report, needs_run_dir=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.needs_run_dir and args.run_dir is None:
        parser.error(f"{args.command} requires --run-dir")
    if args.backend is not None:
        _backend.set_backend(args.backend)
    try:
        return args.func(args)
    except MtldiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
