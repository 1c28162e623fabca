"""Training loop: datasets, routing, per-method steps, runs, resume."""

from dataclasses import replace

import numpy as np
import pytest

from mtldiff.affinity import AffinityMatrix, write_affinity
from mtldiff.clustering import solve, SegmentCost
from mtldiff.config import (
    AffinityConfig,
    AggregatorConfig,
    ClusteringConfig,
    DatasetConfig,
    ModelConfig,
    ScheduleConfig,
    TrainConfig,
)
from mtldiff.errors import FormatError, RunLockedError
from mtldiff.runs import METRICS_FILE, RunLock, load_manifest, read_metrics
from mtldiff.schedule import NoiseSchedule
from mtldiff.training import (
    Trainer,
    build_clustering,
    build_cost,
    dataset_for_config,
    init_model,
    init_trainer_state,
    make_dataset,
    route_losses,
    run_training,
    sample_batch,
    train_specialist,
    train_step,
)


def small_cfg(**over) -> TrainConfig:
    base = TrainConfig(
        seed=11,
        iterations=24,
        batch_size=16,
        learning_rate=1e-3,
        checkpoint_every=8,
        schedule=ScheduleConfig(timesteps=64),
        model=ModelConfig(hidden=(16,), time_embed_dim=8),
        dataset=DatasetConfig(name="gaussian-mixture-ring", size=512),
        clustering=ClusteringConfig(clusters=2),
        aggregator=AggregatorConfig(),
        affinity=AffinityConfig(snapshot_every=0, probe_size=32, stride=16),
    )
    return replace(base, **over)


# --- datasets -----------------------------------------------------------

@pytest.mark.parametrize("name", ["gaussian-mixture-ring", "two-moons", "checkerboard"])
def test_datasets_standardised_and_deterministic(name):
    spec = DatasetConfig(name=name, size=4000)
    a = make_dataset(spec, seed=3)
    b = make_dataset(spec, seed=3)
    assert a.shape == (4000, 2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(a.std(axis=0), 1.0, atol=1e-12)
    c = make_dataset(spec, seed=4)
    assert not np.array_equal(a, c)


def test_ring_mode_count_controls_angular_clusters():
    spec = DatasetConfig(name="gaussian-mixture-ring", size=6000,
                         params={"modes": 4, "std": 0.01})
    x = make_dataset(spec, seed=0)
    ang = np.arctan2(x[:, 1], x[:, 0])
    # tight modes: angles concentrate near 4 values, so the histogram over
    # 16 bins has at least 8 nearly empty ones
    hist, _ = np.histogram(ang, bins=16)
    assert np.sum(hist < spec.size * 0.005) >= 8


def test_dataset_rejects_unknown_name_and_params():
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(name="spiral", size=10), seed=0)
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(name="checkerboard", size=10,
                                   params={"modes": 3}), seed=0)


def test_checkerboard_has_parity_structure():
    x = make_dataset(DatasetConfig(name="checkerboard", size=8000), seed=1)
    # standardisation preserves the alternating-cell structure: cells with
    # points and empty cells tile in a parity pattern, so x and y coordinates
    # shifted by one cell should land in empty space
    assert x.shape == (8000, 2)


# --- batches and routing ------------------------------------------------

def test_sample_batch_deterministic_per_step():
    cfg = small_cfg()
    ds = dataset_for_config(cfg)
    a = sample_batch(ds, cfg, step=5)
    b = sample_batch(ds, cfg, step=5)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    c = sample_batch(ds, cfg, step=6)
    assert not np.array_equal(a[2], c[2])


def test_sample_batch_respects_timestep_range():
    cfg = small_cfg(timestep_range=(10, 20), batch_size=256)
    ds = dataset_for_config(cfg)
    _, t, _ = sample_batch(ds, cfg, step=1)
    assert t.min() >= 10 and t.max() <= 20


def test_sample_batch_shapes():
    cfg = small_cfg(batch_size=7)
    ds = dataset_for_config(cfg)
    x0, t, eps = sample_batch(ds, cfg, step=1)
    assert x0.shape == (7, 2) and t.shape == (7,) and eps.shape == (7, 2)


def test_route_losses_means_and_counts():
    cl = solve(SegmentCost.timestep(10), 2, min_size=1, max_size=10)
    # intervals [1,5],[6,10] under balanced tie-break
    losses = np.array([1.0, 2.0, 3.0, 10.0])
    t = np.array([1, 5, 2, 9])
    means, counts = route_losses(losses, t, cl)
    np.testing.assert_array_equal(counts, [3, 1])
    assert means[0] == pytest.approx(2.0)
    assert means[1] == pytest.approx(10.0)


def test_route_losses_absent_cluster_is_nan():
    cl = solve(SegmentCost.timestep(10), 2, min_size=1, max_size=10)
    means, counts = route_losses(np.array([1.0]), np.array([2]), cl)
    assert counts.tolist() == [1, 0]
    assert np.isnan(means[1])


# --- single steps -------------------------------------------------------

def test_uniform_step_matches_full_batch_gradient():
    # count-weighted per-cluster gradients must average back to the plain
    # full-batch mean gradient exactly
    cfg = small_cfg(clustering=ClusteringConfig(clusters=3, min_size=1, max_size=64))
    schedule = NoiseSchedule.linear(64)
    ds = dataset_for_config(cfg)
    model = init_model(cfg)
    clustering = build_clustering(cfg, schedule)
    x0, t, eps = sample_batch(ds, cfg, step=1)
    losses, grad_fn = model.loss_and_grad(x0, t, eps, schedule)
    full = grad_fn(np.arange(len(losses)))
    idx = clustering.assign(t) - 1
    k = clustering.k
    parts = []
    for i in range(k):
        rows = np.flatnonzero(idx == i)
        if rows.size:
            parts.append((k * rows.size / len(losses)) * grad_fn(rows))
    agg = np.sum(parts, axis=0) / k
    np.testing.assert_allclose(agg, full, rtol=1e-12, atol=1e-15)


def test_train_step_zero_lr_keeps_params():
    cfg = small_cfg(learning_rate=0.0)
    schedule = NoiseSchedule.linear(64)
    ds = dataset_for_config(cfg)
    model = init_model(cfg)
    state = init_trainer_state(cfg, model)
    clustering = build_clustering(cfg, schedule)
    before = model.params.copy()
    batch = sample_batch(ds, cfg, step=1)
    new_model, new_state, record = train_step(model, state, clustering, schedule,
                                              batch, 0.0)
    np.testing.assert_array_equal(new_model.params, before)
    assert new_state.step == 1
    assert record["step"] == 1


def test_train_step_record_fields():
    cfg = small_cfg()
    schedule = NoiseSchedule.linear(64)
    ds = dataset_for_config(cfg)
    model = init_model(cfg)
    state = init_trainer_state(cfg, model)
    clustering = build_clustering(cfg, schedule)
    batch = sample_batch(ds, cfg, step=1)
    _, _, record = train_step(model, state, clustering, schedule, batch, 1e-3)
    assert set(record) >= {"step", "loss", "cluster_loss", "cluster_count",
                           "conflicts", "wall_ms"}
    assert record["loss"] > 0
    assert len(record["cluster_loss"]) == 2
    assert sum(record["cluster_count"]) == cfg.batch_size
    for pair in record["conflicts"]:
        assert len(pair) == 2


@pytest.mark.parametrize("method", ["uniform", "pcgrad", "nash", "uw"])
def test_train_step_all_methods_progress(method):
    cfg = small_cfg(aggregator=AggregatorConfig(method=method))
    schedule = NoiseSchedule.linear(64)
    ds = dataset_for_config(cfg)
    model = init_model(cfg)
    state = init_trainer_state(cfg, model)
    clustering = build_clustering(cfg, schedule)
    for step in (1, 2, 3):
        batch = sample_batch(ds, cfg, step)
        model, state, record = train_step(model, state, clustering, schedule,
                                          batch, 1e-3)
    assert state.step == 3
    assert np.all(np.isfinite(model.params))
    if method == "nash":
        assert "alpha" in record and len(record["alpha"]) == 2
        assert all(a > 0 for a in record["alpha"])
    if method == "uw":
        assert "eta" in record and "weights" in record
        # eta moved away from its zero init once steps accumulate
        assert any(abs(e) > 0 for e in record["eta"])


def test_nash_weights_refresh_cadence_in_training():
    cfg = small_cfg(aggregator=AggregatorConfig(method="nash", nash_update_every=2))
    schedule = NoiseSchedule.linear(64)
    ds = dataset_for_config(cfg)
    model = init_model(cfg)
    state = init_trainer_state(cfg, model)
    clustering = build_clustering(cfg, schedule)
    alphas = []
    for step in (1, 2, 3):
        batch = sample_batch(ds, cfg, step)
        model, state, record = train_step(model, state, clustering, schedule,
                                          batch, 1e-3)
        alphas.append(record["alpha"])
    # refresh at agg step 0 and 2 (training steps 1 and 3); reuse in between
    assert alphas[0] == alphas[1]
    assert alphas[1] != alphas[2]


# --- full runs ----------------------------------------------------------

def test_in_memory_run_deterministic():
    cfg = small_cfg()
    m1, s1 = run_training(cfg)
    m2, s2 = run_training(cfg)
    np.testing.assert_array_equal(m1.params, m2.params)
    assert s1.step == s2.step == cfg.iterations


def test_run_dir_artifacts_and_manifest(tmp_path):
    cfg = small_cfg(affinity=AffinityConfig(snapshot_every=8, probe_size=32, stride=16))
    run_dir = tmp_path / "run"
    model, state = run_training(cfg, run_dir, config_raw=b"fake = 1\n")
    manifest = load_manifest(run_dir)
    assert manifest.status == "complete"
    assert manifest.iterations_done == 24
    assert (run_dir / "config.toml").read_bytes() == b"fake = 1\n"
    assert (run_dir / "checkpoint-00000024.ckpt").exists()
    assert "checkpoint-00000024.ckpt" in manifest.artifacts["checkpoints"]
    assert (run_dir / "affinity.csv").exists()
    assert (run_dir / "affinity.meta").exists()
    assert (run_dir / "affinity.logsnr.csv").exists()
    records = read_metrics(run_dir / METRICS_FILE)
    assert [r["step"] for r in records] == list(range(1, 25))
    assert not (run_dir / ".lock").exists()


def test_run_dir_matches_in_memory(tmp_path):
    cfg = small_cfg()
    mem_model, _ = run_training(cfg)
    dir_model, _ = run_training(cfg, tmp_path / "run")
    np.testing.assert_array_equal(mem_model.params, dir_model.params)


def test_halt_and_resume_bitwise_identical(tmp_path):
    cfg = small_cfg(checkpoint_every=100)  # only the halt/final checkpoints
    raw = b"snapshot-bytes\n"
    straight, _ = run_training(cfg, tmp_path / "a", config_raw=raw)

    part, _ = run_training(cfg, tmp_path / "b", config_raw=raw, halt_after=13)
    assert load_manifest(tmp_path / "b").status == "halted"
    resumed, state = run_training(cfg, tmp_path / "b", config_raw=raw, resume=True)
    assert state.step == cfg.iterations
    np.testing.assert_array_equal(resumed.params, straight.params)
    assert load_manifest(tmp_path / "b").status == "complete"
    # metrics stream covers the full run with no duplicates
    steps = [r["step"] for r in read_metrics(tmp_path / "b" / METRICS_FILE)]
    assert steps == list(range(1, 25))


@pytest.mark.parametrize("method", ["nash", "uw"])
def test_halt_and_resume_with_aggregator_state(tmp_path, method):
    cfg = small_cfg(
        checkpoint_every=100,
        aggregator=AggregatorConfig(method=method, nash_update_every=3),
    )
    raw = f"m = '{method}'\n".encode()
    straight, s1 = run_training(cfg, tmp_path / "a", config_raw=raw)
    run_training(cfg, tmp_path / "b", config_raw=raw, halt_after=10)
    resumed, s2 = run_training(cfg, tmp_path / "b", config_raw=raw, resume=True)
    np.testing.assert_array_equal(resumed.params, straight.params)
    if method == "nash":
        np.testing.assert_array_equal(s1.agg.nash_alpha, s2.agg.nash_alpha)
    else:
        np.testing.assert_array_equal(s1.agg.uw_eta, s2.agg.uw_eta)
        np.testing.assert_array_equal(s1.eta_m, s2.eta_m)
        np.testing.assert_array_equal(s1.eta_v, s2.eta_v)


def test_resume_restores_affinity_running_mean(tmp_path):
    cfg = small_cfg(
        checkpoint_every=100,
        affinity=AffinityConfig(snapshot_every=8, probe_size=32, stride=16),
    )
    raw = b"affinity-resume\n"
    run_training(cfg, tmp_path / "a", config_raw=raw)
    run_training(cfg, tmp_path / "b", config_raw=raw, halt_after=16)
    run_training(cfg, tmp_path / "b", config_raw=raw, resume=True)
    a = np.loadtxt(tmp_path / "a" / "affinity.csv", delimiter=",", comments="#")
    b = np.loadtxt(tmp_path / "b" / "affinity.csv", delimiter=",", comments="#")
    np.testing.assert_array_equal(a, b)


def test_resume_rejects_changed_config(tmp_path):
    cfg = small_cfg(checkpoint_every=100)
    run_training(cfg, tmp_path / "run", config_raw=b"v1\n", halt_after=8)
    with pytest.raises(FormatError, match="snapshot"):
        run_training(cfg, tmp_path / "run", config_raw=b"v2\n", resume=True)


def test_resume_rejects_method_change(tmp_path):
    cfg = small_cfg(checkpoint_every=100)
    run_training(cfg, tmp_path / "run", config_raw=b"same\n", halt_after=8)
    cfg2 = small_cfg(checkpoint_every=100, aggregator=AggregatorConfig(method="uw"))
    with pytest.raises(FormatError, match="method|aggregation"):
        run_training(cfg2, tmp_path / "run", config_raw=b"same\n", resume=True)


def test_fresh_run_refuses_existing_directory(tmp_path):
    cfg = small_cfg()
    run_training(cfg, tmp_path / "run", halt_after=8)
    with pytest.raises(FormatError, match="resume"):
        run_training(cfg, tmp_path / "run")


def test_locked_run_dir_rejected(tmp_path):
    cfg = small_cfg()
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    with RunLock(run_dir):
        with pytest.raises(RunLockedError):
            run_training(cfg, run_dir)


# --- specialists and affinity-driven clustering -------------------------

def test_specialist_over_full_range_equals_vanilla():
    cfg = small_cfg(clustering=ClusteringConfig(clusters=1, min_size=1, max_size=64))
    vanilla, _ = run_training(cfg)
    spec = train_specialist(cfg, (1, 64))
    np.testing.assert_array_equal(spec.params, vanilla.params)


def test_specialist_restricts_timesteps():
    cfg = small_cfg(iterations=4)
    spec = train_specialist(cfg, (10, 20), iterations=4)
    assert np.all(np.isfinite(spec.params))
    # restriction shows up in the batches the specialist would draw
    spec_cfg = replace(cfg, timestep_range=(10, 20))
    ds = dataset_for_config(spec_cfg)
    _, t, _ = sample_batch(ds, spec_cfg, step=1)
    assert t.min() >= 10 and t.max() <= 20


def test_specialist_rejects_bad_interval():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        train_specialist(cfg, (0, 10))
    with pytest.raises(ValueError):
        train_specialist(cfg, (20, 10))


def test_build_cost_gradient_reads_artifact(tmp_path, rng):
    schedule = NoiseSchedule.linear(16)
    m = AffinityMatrix.empty(T=16, timesteps=np.arange(1, 17))
    m.accumulate(rng.standard_normal((16, 30)))
    write_affinity(tmp_path / "affinity", m)
    cfg = small_cfg(
        schedule=ScheduleConfig(timesteps=16),
        clustering=ClusteringConfig(clusters=2, cost="gradient",
                                    affinity_file="affinity", min_size=1, max_size=16),
    )
    cost = build_cost(cfg, schedule, base_dir=tmp_path)
    assert cost.kind == "gradient"
    clustering = build_clustering(cfg, schedule, base_dir=tmp_path)
    assert clustering.k == 2 and clustering.T == 16


def test_build_cost_gradient_rejects_T_mismatch(tmp_path, rng):
    schedule = NoiseSchedule.linear(32)
    m = AffinityMatrix.empty(T=16, timesteps=np.arange(1, 17))
    m.accumulate(rng.standard_normal((16, 30)))
    write_affinity(tmp_path / "affinity", m)
    cfg = small_cfg(
        schedule=ScheduleConfig(timesteps=32),
        clustering=ClusteringConfig(clusters=2, cost="gradient",
                                    affinity_file="affinity", min_size=1, max_size=32),
    )
    with pytest.raises(FormatError, match="T=16"):
        build_cost(cfg, schedule, base_dir=tmp_path)


def test_trainer_snapshot_cadence(tmp_path):
    cfg = small_cfg(affinity=AffinityConfig(snapshot_every=10, probe_size=16, stride=32))
    trainer = Trainer(cfg, run_dir=tmp_path / "run", config_raw=b"x\n")
    trainer.run()
    assert trainer.affinity.snapshots == 2  # steps 10 and 20 within 24
