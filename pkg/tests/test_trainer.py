"""Training configuration, ray batches, train steps and the training loop."""

import copy
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from autodiff import adam_step, forward_backward, load_checkpoint, numerical_gradient, relative_error
from config import ConfigError
from dataset import DatasetError, load_dataset, load_priors
from geometry import RayBundle, pixel_rays
from supervision import DepthPrior
from trainer import (
    LAST_CHECKPOINT,
    LOG_FILE,
    RUN_FILE,
    RayBatch,
    TrainConfig,
    batch_rng,
    build_ray_batch,
    build_ray_pool,
    chunk_loss,
    config_from_values,
    load_run_file,
    new_params,
    render_view,
    save_run_file,
    train,
    train_step,
)

from conftest import tiny_train_config


# ── Helpers ──────────────────────────────────────────────────────────────

def _invalid_priors(priors):
    return {
        name: DepthPrior(np.full_like(p.depth, -1.0), np.zeros_like(p.corr), np.zeros_like(p.valid))
        for name, p in priors.items()
    }


def _one_ray_batch(prior_depth=1450.0):
    rays = RayBundle(
        origins=np.array([[0.0, 0.0, 1500.0]]),
        directions=np.array([[0.0, 0.0, -1.0]]),
        near=np.array([1400.0]),
        far=np.array([1500.0]),
    )
    prior = DepthPrior(np.array([prior_depth]), np.array([1.0]), np.array([True]))
    return RayBatch(rays, np.array([[0.5, 0.5, 0.5]]), prior, np.array([1e-4]), np.array([0]))


def _valid_rays(batch, count):
    idx = np.flatnonzero(batch.prior.valid)[:count]
    prior = DepthPrior(batch.prior.depth[idx], batch.prior.corr[idx], batch.prior.valid[idx])
    return RayBatch(batch.rays.subset(idx), batch.target[idx], prior, batch.sigma[idx], batch.index[idx])


def _gradient_config(**overrides):
    values = dict(n_stratified=4, n_guided=4, width=16, depth=2, skip=1, n_freq_pos=2, n_freq_dir=1,
                  activation="sine", reduction="mean", lambda_depth=0.5, sampling="guided")
    values.update(overrides)
    return tiny_train_config(**values)


@pytest.fixture(scope="module")
def loaded(urban_dataset):
    data_dir, prior_dir = urban_dataset
    dataset = load_dataset(data_dir)
    return dataset, load_priors(prior_dir, dataset)


# ── Config ───────────────────────────────────────────────────────────────

class TestTrainConfig:

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            config_from_values({"learning_rate": "0.1"})
        assert err.value.key == "learning_rate"

    def test_full_preset(self):
        cfg = config_from_values({"preset": "full"})
        assert (cfg.iterations, cfg.batch_size, cfg.lr) == (30000, 1024, 1e-5)
        assert (cfg.n_stratified, cfg.n_guided, cfg.decay_period) == (64, 64, 10000)

    def test_override_beats_preset(self):
        cfg = config_from_values({"preset": "full", "iterations": "10"})
        assert cfg.iterations == 10 and cfg.batch_size == 1024

    @pytest.mark.parametrize("key,raw", [("width", "4"), ("variant", "magic"), ("lr", "-1"), ("gamma", "0"), ("iterations", "x")])
    def test_bad_values_name_key(self, key, raw):
        with pytest.raises(ConfigError) as err:
            config_from_values({key: raw})
        assert err.value.key == key

    def test_corr_constant(self):
        assert config_from_values({"corr_constant": "none"}).corr_constant is None
        assert config_from_values({"corr_constant": "0.5"}).corr_constant == 0.5

    def test_sampling_strategy(self):
        assert TrainConfig(variant="nerf").sampling_strategy == "hierarchical"
        assert TrainConfig(variant="dense_satnerf").sampling_strategy == "hierarchical"
        assert TrainConfig(variant="full").sampling_strategy == "guided"
        assert TrainConfig(variant="nerf", sampling="guided").sampling_strategy == "guided"

    def test_run_file_round_trip(self, tmp_path):
        cfg = tiny_train_config(variant="dense_nocorr", corr_constant=0.4, replacement=False)
        save_run_file(tmp_path / RUN_FILE, cfg, {"dataset": "/data/x"})
        back, extra = load_run_file(tmp_path / RUN_FILE)
        assert back == cfg
        assert extra == {"dataset": "/data/x"}


# ── Ray pool and batches ─────────────────────────────────────────────────

class TestRayBatches:

    def test_without_replacement_covers_every_pixel(self, loaded):
        dataset, priors = loaded
        pool = build_ray_pool(dataset, priors, tiny_train_config())
        assert len(pool) == 2 * 32 * 32
        batch = build_ray_batch(pool, len(pool), batch_rng(0, 1), replace=False)
        np.testing.assert_array_equal(np.sort(batch.index), np.arange(len(pool)))

    def test_deterministic(self, loaded):
        dataset, priors = loaded
        pool = build_ray_pool(dataset, priors, tiny_train_config())
        a = build_ray_batch(pool, 64, batch_rng(3, 7))
        b = build_ray_batch(pool, 64, batch_rng(3, 7))
        assert np.array_equal(a.index, b.index)
        assert not np.array_equal(a.index, build_ray_batch(pool, 64, batch_rng(3, 8)).index)

    def test_prior_follows_pixel(self, loaded):
        dataset, priors = loaded
        pool = build_ray_pool(dataset, priors, tiny_train_config())
        batch = build_ray_batch(pool, 64, batch_rng(0, 1))
        for i in batch.index[:10]:
            view = dataset.train[pool.view_index[i]]
            assert pool.prior.depth[i] == priors[view].depth.ravel()[pool.pixel_index[i]]
            assert pool.prior.valid[i] == priors[view].valid.ravel()[pool.pixel_index[i]]
            np.testing.assert_allclose(pool.target[i], dataset.view(view).image.reshape(-1, 3)[pool.pixel_index[i]])

    def test_variant_ladder(self, loaded):
        dataset, priors = loaded
        full = build_ray_pool(dataset, priors, tiny_train_config(variant="full"))
        nocorr = build_ray_pool(dataset, priors, tiny_train_config(variant="dense_nocorr"))
        sparse = build_ray_pool(dataset, priors, tiny_train_config(variant="sparse_depth"))
        nerf = build_ray_pool(dataset, None, tiny_train_config(variant="nerf"))
        assert full.prior.valid.sum() > 0
        np.testing.assert_allclose(full.prior.corr[full.prior.valid], 0.8, rtol=1e-6)
        assert np.all(nocorr.prior.corr == 1.0)
        assert np.array_equal(nocorr.prior.valid, full.prior.valid)
        assert 0 < sparse.prior.valid.sum() < 0.1 * full.prior.valid.sum()
        assert not np.any(sparse.prior.valid & ~full.prior.valid)
        assert not nerf.prior.valid.any()

    def test_corr_constant_overrides_raster(self, loaded):
        dataset, priors = loaded
        pool = build_ray_pool(dataset, priors, tiny_train_config(corr_constant=0.3))
        assert np.all(pool.prior.corr == 0.3)
        np.testing.assert_allclose(pool.sigma, 0.7 + 1e-4)

    @pytest.mark.parametrize("variant", ["dense_nocorr", "dense_satnerf"])
    def test_constant_variants_take_corr_constant(self, loaded, variant):
        dataset, priors = loaded
        pool = build_ray_pool(dataset, priors, tiny_train_config(variant=variant, corr_constant=0.6))
        assert np.all(pool.prior.corr == 0.6)
        np.testing.assert_allclose(pool.sigma, 0.4 + 1e-4)

    def test_prior_variant_needs_priors(self, loaded):
        with pytest.raises(DatasetError):
            build_ray_pool(loaded[0], None, tiny_train_config(variant="full"))


# ── Train step ───────────────────────────────────────────────────────────

class TestTrainStep:

    def test_nerf_has_no_depth_loss(self, loaded):
        dataset, priors = loaded
        cfg = tiny_train_config(variant="nerf")
        pool = build_ray_pool(dataset, None, cfg)
        losses = train_step(new_params(cfg), build_ray_batch(pool, 32, batch_rng(0, 1)), cfg, dataset.envelope, threads=0)
        assert losses["depth_loss"] == 0.0
        assert losses["color_loss"] > 0.0
        assert losses["lr"] == cfg.lr

    def test_invalid_priors_match_nerf(self, loaded):
        dataset, priors = loaded
        nerf_cfg = tiny_train_config(variant="nerf", sampling="hierarchical")
        full_cfg = tiny_train_config(variant="full", sampling="hierarchical")
        nerf_pool = build_ray_pool(dataset, None, nerf_cfg)
        full_pool = build_ray_pool(dataset, _invalid_priors(priors), full_cfg)
        a, b = new_params(nerf_cfg), new_params(full_cfg)
        for step in (1, 2):
            train_step(a, build_ray_batch(nerf_pool, 32, batch_rng(0, step)), nerf_cfg, dataset.envelope, step=step, threads=0)
            train_step(b, build_ray_batch(full_pool, 32, batch_rng(0, step)), full_cfg, dataset.envelope, step=step, threads=0)
        for name in a.names():
            assert np.array_equal(a[name], b[name]), name

    def test_thread_count_does_not_change_bits(self, loaded):
        dataset, priors = loaded
        cfg = tiny_train_config()
        pool = build_ray_pool(dataset, priors, cfg)
        batch = build_ray_batch(pool, 64, batch_rng(0, 1))
        a = new_params(cfg)
        b = copy.deepcopy(a)
        la = train_step(a, batch, cfg, dataset.envelope, threads=0, chunk_size=16)
        lb = train_step(b, batch, cfg, dataset.envelope, threads=4, chunk_size=16)
        assert la == lb
        for name in a.names():
            assert np.array_equal(a[name], b[name]), name

    def test_chunk_loss_matches_finite_differences(self, loaded):
        dataset, priors = loaded
        cfg = _gradient_config()
        pool = build_ray_pool(dataset, priors, cfg)
        batch = _valid_rays(build_ray_batch(pool, 128, batch_rng(0, 1)), 16)
        assert len(batch) == 16
        params = new_params(cfg, np.float64)

        def total(p):
            losses, _ = chunk_loss(p, cfg, dataset.envelope, batch, 1, 0, 1.0 / 16)
            return losses["color_loss"] + cfg.lambda_depth * losses["depth_loss"]

        losses, analytic = chunk_loss(params, cfg, dataset.envelope, batch, 1, 0, 1.0 / 16)
        assert losses["active_rays"] > 0
        numeric = numerical_gradient(params, total, step=1e-6)
        for name in params.names():
            assert relative_error(analytic[name], numeric[name], floor=1e-5) < 1e-4, name

    def test_inactive_valid_rays_leave_gradient_unchanged(self, loaded):
        dataset, priors = loaded
        cfg = _gradient_config()
        pool = build_ray_pool(dataset, priors, cfg)
        batch = _valid_rays(build_ray_batch(pool, 128, batch_rng(0, 2)), 16)
        # Sigma far above any depth spread or residual: every ray fails both gating conditions
        batch.sigma[...] = 1e4
        params = new_params(cfg, np.float64)

        losses, grads = chunk_loss(params, cfg, dataset.envelope, batch, 1, 0, 1.0)
        _, color_only = chunk_loss(params, replace(cfg, lambda_depth=0.0), dataset.envelope, batch, 1, 0, 1.0)
        assert np.all(batch.prior.valid)
        assert losses["active_rays"] == 0.0
        assert losses["depth_loss"] == 0.0
        for name in params.names():
            assert np.array_equal(grads[name], color_only[name]), name

    def test_one_ray_depth_loss_decreases(self, envelope):
        cfg = tiny_train_config(lambda_depth=10.0, n_stratified=16, n_guided=8)
        params = new_params(cfg, np.float64)
        batch = _one_ray_batch()
        # one fixed sample draw, so every step descends the same objective
        history = []
        for step in range(1, 51):
            losses = forward_backward(params, [batch], lambda p, b: chunk_loss(p, cfg, envelope, b, 1, 0, 1.0), threads=0)
            history.append(losses["depth_loss"])
            adam_step(params, 1e-3, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, step=step)
        assert history[0] > 0.0
        assert np.all(np.diff(history) < 0), history

    def test_empty_batch(self, envelope):
        cfg = tiny_train_config()
        empty = _one_ray_batch().chunk(0, 0)
        with pytest.raises(ValueError):
            train_step(new_params(cfg), empty, cfg, envelope)


# ── Training loop ────────────────────────────────────────────────────────

class TestTrain:

    def test_single_iteration_logs_one_row(self, loaded, tmp_path):
        dataset, priors = loaded
        _, log = train(dataset, priors, tiny_train_config(iterations=1, log_period=10), tmp_path, threads=0)
        assert list(log["step"]) == [1]
        assert os.path.isfile(tmp_path / LAST_CHECKPOINT)
        assert os.path.isfile(tmp_path / RUN_FILE)

    def test_log_rows(self, loaded, tmp_path):
        dataset, priors = loaded
        _, log = train(dataset, priors, tiny_train_config(iterations=5, log_period=2, batch_size=16), tmp_path, threads=0)
        assert list(log["step"]) == [2, 4, 5]
        on_disk = pd.read_csv(tmp_path / LOG_FILE)
        assert list(on_disk.columns) == ["step", "color_loss", "depth_loss", "lr"]
        assert len(on_disk) == 3
        assert os.path.isfile(tmp_path / "checkpoint_000002.spsc")
        assert os.path.isfile(tmp_path / "checkpoint_000004.spsc")

    def test_resume_reproduces_losses(self, loaded, tmp_path):
        dataset, priors = loaded
        straight_cfg = tiny_train_config(iterations=4, batch_size=16)
        _, straight = train(dataset, priors, straight_cfg, tmp_path / "straight", threads=0)

        train(dataset, priors, tiny_train_config(iterations=2, batch_size=16), tmp_path / "resumed", threads=0)
        params, resumed = train(dataset, priors, straight_cfg, tmp_path / "resumed", resume=True, threads=0)

        assert params.step == 4
        pd.testing.assert_frame_equal(resumed, straight)
        final = load_checkpoint(tmp_path / "straight" / LAST_CHECKPOINT)
        for name in params.names():
            assert np.array_equal(params[name], final[name]), name

    def test_render_view_shapes(self, loaded, tmp_path):
        dataset, priors = loaded
        cfg = tiny_train_config(iterations=1)
        params, _ = train(dataset, priors, cfg, tmp_path, threads=0)
        view = dataset.view("test")
        rgb, depth = render_view(params, cfg, view.camera, dataset.envelope, threads=0)
        assert rgb.shape == (32, 32, 3) and depth.shape == (32, 32)
        assert np.all((rgb >= 0) & (rgb <= 1))
        bundle, hit = pixel_rays(view.camera, view.camera.pixel_centers(), dataset.envelope)
        assert hit.all()
        flat = depth.ravel()
        assert np.all(flat >= bundle.near - 1e-3) and np.all(flat <= bundle.far + 1e-3)
