"""Multi-task diffusion training on 2-D toy data.

Denoising across noise levels is treated as many tasks: timesteps are
clustered into contiguous intervals, per-cluster losses and gradients are
aggregated with multi-task methods, gradient alignment between noise levels
is tracked as an affinity matrix, and negative transfer is measured by
swapping interval specialists into a deterministic sampler.
"""

from ._backend import active_backend, available_backends, set_backend
from .affinity import AffinityMatrix, affinity_grid, read_affinity, snapshot_gradients, \
    write_affinity
from .aggregate import (AggregatorState, combine_step, nash_combine, nash_solve,
                        pcgrad_combine, uw_total_loss)
from .clustering import (IntervalClustering, SegmentCost, default_bounds,
                         read_clustering, solve, write_clustering)
from .config import TrainConfig, load_config
from .denoiser import Checkpoint, MlpDenoiser, load_checkpoint, save_checkpoint
from .errors import (FormatError, InfeasibleClusteringError, MtldiffError,
                     NonConvergenceError, NotPositiveDefiniteError, RunLockedError,
                     SchemaError, VersionError)
from .evaluate import (NTGReport, ddim_sample, hybrid_ddim_sample, ntg, ntg_intervals,
                       sliced_wasserstein, wasserstein_1d)
from .schedule import NoiseSchedule
from .training import (Trainer, make_dataset, route_losses, run_training, sample_batch,
                       train_specialist, train_step)

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix", "AggregatorState", "Checkpoint", "FormatError",
    "InfeasibleClusteringError", "IntervalClustering", "MlpDenoiser", "MtldiffError",
    "NTGReport", "NoiseSchedule", "NonConvergenceError", "NotPositiveDefiniteError",
    "RunLockedError", "SchemaError", "SegmentCost", "TrainConfig", "Trainer",
    "VersionError", "active_backend", "affinity_grid", "available_backends",
    "combine_step", "ddim_sample", "default_bounds", "hybrid_ddim_sample",
    "load_checkpoint", "load_config", "make_dataset", "nash_combine", "nash_solve",
    "ntg", "ntg_intervals", "pcgrad_combine", "read_affinity", "read_clustering",
    "route_losses", "run_training", "sample_batch", "save_checkpoint", "set_backend",
    "sliced_wasserstein", "snapshot_gradients", "solve", "train_specialist",
    "train_step", "uw_total_loss", "wasserstein_1d", "write_affinity",
    "write_clustering",
]
