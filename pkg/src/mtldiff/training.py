"""Training: toy datasets, per-cluster routing, aggregation, Adam, artifacts.

Every random stream is derived from the run seed plus a fixed domain tag
(model init, per-step batches, affinity probe, snapshot noise, dataset), so
a run is a pure function of its config and interrupted runs resume on the
exact trajectory they would have taken uninterrupted.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import runs
from .affinity import AffinityMatrix, affinity_grid, snapshot_gradients, write_affinity, \
    write_log_snr_axis, read_affinity
from .aggregate import AggregatorState, combine_step
from .clustering import IntervalClustering, SegmentCost, solve
from .config import DatasetConfig, TrainConfig
from .denoiser import MlpDenoiser, load_checkpoint, save_checkpoint
from .errors import FormatError, NonConvergenceError
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

# Random-stream domain tags, mixed with the run seed.
_D_INIT, _D_BATCH, _D_PROBE, _D_SNAP_NOISE, _D_DATASET = 0, 1, 2, 3, 4

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_PATTERN = "checkpoint-{step:08d}.ckpt"


def make_dataset(spec: DatasetConfig, seed) -> np.ndarray:
    """Sample a 2-D toy dataset, standardised to zero mean and unit variance.

    Supported names: ``gaussian-mixture-ring`` (params modes/radius/std),
    ``two-moons`` (param noise), ``checkerboard`` (no params).
    """
    rng = np.random.default_rng(seed)
    n = spec.size
    p = dict(spec.params)
    if spec.name == "gaussian-mixture-ring":
        modes = int(p.pop("modes", 8))
        radius = float(p.pop("radius", 1.0))
        std = float(p.pop("std", 0.1))
        if modes < 1:
            raise ValueError(f"need at least one mode, got {modes}")
        ang = 2.0 * np.pi * rng.integers(0, modes, n) / modes
        x = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        x += std * rng.standard_normal((n, 2))
    elif spec.name == "two-moons":
        noise = float(p.pop("noise", 0.05))
        n_upper = n - n // 2
        th_u = np.pi * rng.random(n_upper)
        th_l = np.pi * rng.random(n // 2)
        upper = np.stack([np.cos(th_u), np.sin(th_u)], axis=1)
        lower = np.stack([1.0 - np.cos(th_l), 0.5 - np.sin(th_l)], axis=1)
        x = np.concatenate([upper, lower])
        x += noise * rng.standard_normal((n, 2))
    elif spec.name == "checkerboard":
        # 4x4 board on [-2, 2]^2 with the even-parity cells filled
        col = rng.integers(0, 4, n)
        row = 2 * rng.integers(0, 2, n) + col % 2
        u = rng.random((n, 2))
        x = np.stack([col - 2.0 + u[:, 0], row - 2.0 + u[:, 1]], axis=1)
    else:
        raise ValueError(f"unknown dataset {spec.name!r}")
    if p:
        raise ValueError(f"unknown dataset params {sorted(p)} for {spec.name!r}")
    mean = x.mean(axis=0)
    std_ = x.std(axis=0)
    std_ = np.where(std_ > 0, std_, 1.0)
    return (x - mean) / std_


def sample_batch(dataset: np.ndarray, cfg: TrainConfig, step: int):
    """Deterministic batch for a 1-based step: (x0, t, eps).

    Indices, timesteps (uniform over the configured range), and noise come
    from a fresh generator seeded by (run seed, batch domain, step), so any
    step's batch can be reproduced in isolation.
    """
    rng = np.random.default_rng((cfg.seed, _D_BATCH, step))
    idx = rng.integers(0, dataset.shape[0], cfg.batch_size)
    lo, hi = cfg.effective_timestep_range()
    t = rng.integers(lo, hi + 1, cfg.batch_size)
    eps = rng.standard_normal((cfg.batch_size, dataset.shape[1]))
    return dataset[idx], t, eps


def route_losses(losses, t, clustering: IntervalClustering):
    """Per-cluster mean loss and sample count for one batch.

    Clusters absent from the batch get count 0 and a NaN mean; they carry no
    information this step and are skipped by aggregation.
    """
    losses = np.asarray(losses, dtype=np.float64)
    idx = np.asarray(clustering.assign(np.asarray(t))) - 1
    k = clustering.k
    counts = np.bincount(idx, minlength=k)
    sums = np.bincount(idx, weights=losses, minlength=k)
    means = np.full(k, np.nan)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means, counts.astype(np.int64)


@dataclass
class TrainerState:
    """Optimiser and aggregator state after ``step`` completed updates."""

    step: int
    agg: AggregatorState
    adam_m: np.ndarray
    adam_v: np.ndarray
    eta_m: np.ndarray | None = None
    eta_v: np.ndarray | None = None


def init_model(cfg: TrainConfig) -> MlpDenoiser:
    return MlpDenoiser.create(
        data_dim=2,
        hidden=cfg.model.hidden,
        time_embed_dim=cfg.model.time_embed_dim,
        seed=(cfg.seed, _D_INIT),
    )


def init_trainer_state(cfg: TrainConfig, model: MlpDenoiser) -> TrainerState:
    k = cfg.clustering.clusters
    method = cfg.aggregator.method
    agg = AggregatorState(
        method=method,
        k=k,
        order_seed=cfg.seed,
        nash_update_every=cfg.aggregator.nash_update_every,
        nash_tol=cfg.aggregator.nash_tol,
    )
    state = TrainerState(
        step=0,
        agg=agg,
        adam_m=np.zeros_like(model.params),
        adam_v=np.zeros_like(model.params),
    )
    if method == "uw":
        state.eta_m = np.zeros(k)
        state.eta_v = np.zeros(k)
    return state


def dataset_for_config(cfg: TrainConfig) -> np.ndarray:
    """The dataset a training run under this config draws batches from."""
    return make_dataset(cfg.dataset, seed=(cfg.seed, _D_DATASET))


def probe_for_config(cfg: TrainConfig, dataset: np.ndarray) -> np.ndarray:
    """The fixed probe batch used for affinity snapshots under this config."""
    rng = np.random.default_rng((cfg.seed, _D_PROBE))
    size = min(cfg.affinity.probe_size, dataset.shape[0])
    return dataset[rng.choice(dataset.shape[0], size, replace=False)]


def snapshot_noise_seed(cfg: TrainConfig, index: int):
    """Seed of the noise draw for the index-th affinity snapshot."""
    return (cfg.seed, _D_SNAP_NOISE, index)


def build_cost(cfg: TrainConfig, schedule: NoiseSchedule, base_dir=None) -> SegmentCost:
    """The segment cost the config asks for.

    The gradient variant reads the configured affinity artifact (relative
    paths resolve against ``base_dir``) and interpolates it to the full
    timestep range.
    """
    cc = cfg.clustering
    if cc.cost == "timestep":
        return SegmentCost.timestep(schedule.T)
    if cc.cost == "snr":
        return SegmentCost.snr(schedule)
    path = Path(cc.affinity_file)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    matrix = read_affinity(path)
    if matrix.T != schedule.T:
        raise FormatError(
            f"affinity artifact covers T={matrix.T} but the schedule has T={schedule.T}"
        )
    return SegmentCost.gradient(matrix.dense())


def build_clustering(cfg: TrainConfig, schedule: NoiseSchedule,
                     base_dir=None) -> IntervalClustering:
    """Solve the timestep partition the config asks for."""
    cost = build_cost(cfg, schedule, base_dir=base_dir)
    cc = cfg.clustering
    return solve(cost, cc.clusters, cc.min_size, cc.max_size)


def _adam(x, g, m, v, t, lr):
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    return x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m, v


def train_step(model: MlpDenoiser, state: TrainerState, clustering: IntervalClustering,
               schedule: NoiseSchedule, batch, learning_rate: float):
    """One optimisation step; returns (new model, new state, metrics record).

    Cluster gradients are mean gradients over each cluster's batch members;
    under uniform aggregation they are additionally count-weighted so the
    aggregate reproduces the plain full-batch mean gradient exactly.  A
    failed nash weight refresh keeps the previous weights and flags the
    step instead of aborting the run.
    """
    x0, t, eps = batch
    wall_start = time.perf_counter()
    losses, grad_fn = model.loss_and_grad(x0, t, eps, schedule)
    k = clustering.k
    idx = np.asarray(clustering.assign(np.asarray(t))) - 1
    counts = np.bincount(idx, minlength=k)
    sums = np.bincount(idx, weights=losses, minlength=k)
    n = losses.size

    cluster_grads: list = [None] * k
    cluster_losses: list = [None] * k
    for i in range(k):
        if counts[i] == 0:
            continue
        g = grad_fn(np.flatnonzero(idx == i))
        if state.agg.method == "uniform":
            g = (k * counts[i] / n) * g
        cluster_grads[i] = g
        cluster_losses[i] = sums[i] / counts[i]
    present = [i for i in range(k) if counts[i] > 0]
    conflicts = []
    for a, i in enumerate(present):
        for j in present[a + 1:]:
            if float(cluster_grads[i] @ cluster_grads[j]) < 0.0:
                conflicts.append([i, j])

    solve_failed = False
    try:
        update, eta_grad, agg = combine_step(state.agg, cluster_losses, cluster_grads)
    except NonConvergenceError as e:
        log.warning("weight solve failed at step %d (%s); keeping previous weights",
                    state.step + 1, e)
        G = np.stack([cluster_grads[i] for i in present])
        update = state.agg.nash_alpha[present] @ G
        eta_grad = None
        agg = replace(state.agg, step=state.agg.step + 1)
        solve_failed = True

    step = state.step + 1
    params, adam_m, adam_v = _adam(model.params, update, state.adam_m, state.adam_v,
                                   step, learning_rate)
    new_model = MlpDenoiser(widths=model.widths, time_embed_dim=model.time_embed_dim,
                            params=params)
    eta_m, eta_v = state.eta_m, state.eta_v
    if eta_grad is not None:
        new_eta, eta_m, eta_v = _adam(agg.uw_eta, eta_grad, eta_m, eta_v,
                                      step, learning_rate)
        agg = replace(agg, uw_eta=new_eta)

    record = {
        "step": step,
        "loss": float(losses.mean()),
        "cluster_loss": [float(sums[i] / counts[i]) if counts[i] else None for i in range(k)],
        "cluster_count": counts.tolist(),
        "conflicts": conflicts,
        "wall_ms": (time.perf_counter() - wall_start) * 1e3,
    }
    if agg.method == "nash":
        record["alpha"] = agg.nash_alpha.tolist()
        if solve_failed:
            record["weight_solve_failed"] = True
    if agg.method == "uw":
        record["eta"] = agg.uw_eta.tolist()
        record["weights"] = np.exp(-agg.uw_eta).tolist()

    new_state = TrainerState(step=step, agg=agg, adam_m=adam_m, adam_v=adam_v,
                             eta_m=eta_m, eta_v=eta_v)
    return new_model, new_state, record


class Trainer:
    """One training run: loop, checkpoints, metrics, affinity snapshots.

    With a run directory the trainer locks it, snapshots the config, and
    writes artifacts; without one it trains purely in memory.  Both paths
    execute the identical numeric trajectory for a given config.
    """

    def __init__(self, cfg: TrainConfig, run_dir=None, config_raw: bytes | None = None,
                 resume: bool = False):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.config_raw = config_raw if config_raw is not None else repr(cfg).encode()
        self.resume = resume
        self.schedule = NoiseSchedule.linear(
            cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)
        if cfg.batch_size < cfg.clustering.clusters:
            log.warning("batch_size %d below cluster count %d; expect empty clusters",
                        cfg.batch_size, cfg.clustering.clusters)
        self.dataset = dataset_for_config(cfg)
        base = self.run_dir if self.run_dir is not None else Path.cwd()
        self.clustering = build_clustering(cfg, self.schedule, base_dir=base)
        self.grid = affinity_grid(self.schedule.T, cfg.affinity.stride)
        self.model: MlpDenoiser | None = None
        self.state: TrainerState | None = None
        self.affinity = AffinityMatrix.empty(self.schedule.T, self.grid)
        self.manifest: runs.RunManifest | None = None
        self.probe = (probe_for_config(cfg, self.dataset)
                      if cfg.affinity.snapshot_every > 0 else None)

    def _fresh_start(self):
        self.model = init_model(self.cfg)
        self.state = init_trainer_state(self.cfg, self.model)

    def _checkpoint_path(self, step: int) -> Path:
        return self.run_dir / CHECKPOINT_PATTERN.format(step=step)

    def _latest_checkpoint(self) -> tuple[int, Path] | None:
        best = None
        for path in self.run_dir.glob("checkpoint-*.ckpt"):
            digits = path.stem.split("-")[-1]
            if digits.isdigit():
                step = int(digits)
                if best is None or step > best[0]:
                    best = (step, path)
        return best

    def _restore(self):
        found = self._latest_checkpoint()
        if found is None:
            raise FormatError(f"{self.run_dir}: no checkpoint to resume from")
        step, path = found
        ckpt = load_checkpoint(path)
        if ckpt.iteration != step:
            raise FormatError(f"{path}: iteration {ckpt.iteration} does not match filename")
        if ckpt.meta.get("method") != self.cfg.aggregator.method:
            raise FormatError(
                f"{path}: checkpoint was written under aggregation "
                f"{ckpt.meta.get('method')!r}, config says {self.cfg.aggregator.method!r}"
            )
        self.model = ckpt.model
        k = self.cfg.clustering.clusters
        agg = AggregatorState(
            method=self.cfg.aggregator.method,
            k=k,
            step=int(ckpt.meta.get("agg_step", step)),
            order_seed=self.cfg.seed,
            nash_alpha=ckpt.arrays.get("nash_alpha"),
            nash_update_every=self.cfg.aggregator.nash_update_every,
            nash_tol=self.cfg.aggregator.nash_tol,
            uw_eta=ckpt.arrays.get("uw_eta"),
        )
        try:
            self.state = TrainerState(
                step=step,
                agg=agg,
                adam_m=ckpt.arrays["adam_m"],
                adam_v=ckpt.arrays["adam_v"],
                eta_m=ckpt.arrays.get("eta_m"),
                eta_v=ckpt.arrays.get("eta_v"),
            )
        except KeyError as e:
            raise FormatError(f"{path}: checkpoint lacks optimiser state ({e})") from e
        if "affinity_values" in ckpt.arrays:
            g = self.grid.size
            values = ckpt.arrays["affinity_values"].reshape(g, g)
            self.affinity = AffinityMatrix(
                T=self.schedule.T, timesteps=self.grid, values=values,
                snapshots=int(ckpt.meta.get("affinity_snapshots", 0)),
            )

    def _write_checkpoint(self, step: int):
        meta = {"method": self.state.agg.method, "agg_step": str(self.state.agg.step)}
        arrays = {"adam_m": self.state.adam_m, "adam_v": self.state.adam_v}
        if self.state.agg.method == "nash":
            arrays["nash_alpha"] = self.state.agg.nash_alpha
        if self.state.agg.method == "uw":
            arrays["uw_eta"] = self.state.agg.uw_eta
            arrays["eta_m"] = self.state.eta_m
            arrays["eta_v"] = self.state.eta_v
        if self.affinity.snapshots > 0:
            arrays["affinity_values"] = self.affinity.values.ravel()
            meta["affinity_snapshots"] = str(self.affinity.snapshots)
        path = self._checkpoint_path(step)
        save_checkpoint(path, self.model, seed=self.cfg.seed, iteration=step,
                        meta=meta, arrays=arrays)
        name = path.name
        ckpts = self.manifest.artifacts.setdefault("checkpoints", [])
        if name not in ckpts:
            ckpts.append(name)
        self.manifest.iterations_done = step
        runs.save_manifest(self.run_dir, self.manifest)

    def _take_snapshot(self):
        index = self.affinity.snapshots
        grads = snapshot_gradients(
            self.model, self.schedule, self.probe,
            noise_seed=snapshot_noise_seed(self.cfg, index), timesteps=self.grid)
        self.affinity.accumulate(grads)
        if self.run_dir is not None:
            write_affinity(self.run_dir / "affinity", self.affinity)
            write_log_snr_axis(self.run_dir / "affinity.logsnr.csv", self.schedule, self.grid)
            self.manifest.artifacts["affinity"] = "affinity"
            self.manifest.artifacts["affinity_log_snr"] = "affinity.logsnr.csv"

    def _run_loop(self, target: int, writer):
        cfg = self.cfg
        while self.state.step < target:
            step = self.state.step + 1
            batch = sample_batch(self.dataset, cfg, step)
            self.model, self.state, record = train_step(
                self.model, self.state, self.clustering, self.schedule, batch,
                cfg.learning_rate)
            if writer is not None:
                writer.write(record)
            if (self.probe is not None and cfg.affinity.snapshot_every > 0
                    and step % cfg.affinity.snapshot_every == 0):
                self._take_snapshot()
            if self.run_dir is not None and (
                    step % cfg.checkpoint_every == 0 or step == target):
                writer.flush()
                self._write_checkpoint(step)

    def run(self, halt_after: int | None = None):
        """Train to completion (or ``halt_after`` steps); returns (model, state)."""
        cfg = self.cfg
        target = cfg.iterations if halt_after is None else min(halt_after, cfg.iterations)
        if self.run_dir is None:
            self._fresh_start()
            self._run_loop(target, writer=None)
            return self.model, self.state
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with runs.RunLock(self.run_dir):
            if self.resume:
                self.manifest = runs.check_resume(self.run_dir, self.config_raw)
                if self.manifest.seed != cfg.seed:
                    raise FormatError(
                        f"{self.run_dir}: run was started with seed {self.manifest.seed}, "
                        f"config now says {cfg.seed}"
                    )
                self._restore()
                runs.truncate_metrics(self.run_dir / runs.METRICS_FILE, self.state.step)
            else:
                self.manifest = runs.init_run(self.run_dir, self.config_raw, cfg.seed)
                self._fresh_start()
            self.manifest.status = "running"
            runs.save_manifest(self.run_dir, self.manifest)
            with runs.MetricsWriter(self.run_dir / runs.METRICS_FILE,
                                    append=self.resume) as writer:
                self._run_loop(target, writer)
            self.manifest.status = "complete" if self.state.step >= cfg.iterations else "halted"
            self.manifest.iterations_done = self.state.step
            runs.save_manifest(self.run_dir, self.manifest)
        return self.model, self.state


def run_training(cfg: TrainConfig, run_dir=None, *, config_raw: bytes | None = None,
                 resume: bool = False, halt_after: int | None = None):
    """Train per the config; returns (model, trainer state).

    ``halt_after`` stops early after that many total steps (for testing
    interruption and resume); the run can then continue with ``resume``.
    """
    trainer = Trainer(cfg, run_dir=run_dir, config_raw=config_raw, resume=resume)
    return trainer.run(halt_after=halt_after)


def train_specialist(cfg: TrainConfig, interval, iterations: int | None = None) -> MlpDenoiser:
    """Train an interval specialist: uniform aggregation, a single cluster,
    timestep sampling restricted to ``interval = (t1, t2)``.

    With ``interval = (1, T)`` this is exactly vanilla training under the
    same seed.  Runs in memory and returns the final model.
    """
    t1, t2 = int(interval[0]), int(interval[1])
    T = cfg.schedule.timesteps
    if not 1 <= t1 <= t2 <= T:
        raise ValueError(f"interval must satisfy 1 <= t1 <= t2 <= {T}, got {interval}")
    spec_cfg = replace(
        cfg,
        timestep_range=(t1, t2),
        iterations=iterations if iterations is not None else cfg.iterations,
        clustering=replace(cfg.clustering, clusters=1, cost="timestep",
                           min_size=None, max_size=None, affinity_file=None),
        aggregator=replace(cfg.aggregator, method="uniform"),
        affinity=replace(cfg.affinity, snapshot_every=0),
    )
    model, _ = run_training(spec_cfg)
    return model
