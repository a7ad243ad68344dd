"""
Trainer Module

Responsibilities:
- TrainConfig (key=value file, presets, variant ladder)
- Ray pool over all train pixels with their colors and (gated) priors
- Two-group render pipeline (stratified pass -> guided or importance samples)
- train_step: chunked forward/backward, Adam update with decayed lr
- train loop: CSV log, checkpoints, resume
- `train`, `render` and `ablate` commands

Random draws are keyed on (seed, step, chunk) so a run is reproducible
regardless of worker count and can resume mid-way with identical losses.
"""

import os
import sys
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import trange

from autodiff import (
    NonFiniteError,
    adam_step,
    decayed_lr,
    forward_backward,
    load_checkpoint,
    save_checkpoint,
)
from config import LOG_LEVEL, SPSNERF_CHUNK, ConfigError, coerce, read_key_values, write_key_values
from field import FieldConfig, field_backward, field_forward, init_params
from geometry import Camera, RayBundle, SceneEnvelope, pixel_rays
from renderer import composite, composite_backward
from sampler import (
    GROUP_GUIDED,
    GROUP_STRATIFIED,
    importance_samples,
    merge_groups,
    stratified_samples,
    two_group_samples,
)
from supervision import (
    REDUCTIONS,
    DepthPrior,
    LossWeights,
    color_loss,
    depth_loss,
    prior_uncertainty,
    reduction_scale,
    resolve_correlation,
    total_loss,
)
from utils import run_parallel, write_flt, write_png

logger = logging.getLogger(__name__)

VARIANTS = ("nerf", "sparse_depth", "dense_satnerf", "dense_nocorr", "full")
SAMPLING_MODES = ("auto", "guided", "hierarchical")

# SeedSequence stream tags
_STREAM_BATCH = 0
_STREAM_CHUNK = 1
_STREAM_SPARSE = 2
_STREAM_RENDER = 3
_STREAM_INIT = 4

LOG_FILE = "train_log.csv"
RUN_FILE = "run.txt"
LAST_CHECKPOINT = "checkpoint_last.spsc"


# ==========================================================
# CONFIG
# ==========================================================
@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 512
    lr: float = 5e-4
    lr_decay: float = 0.9
    decay_period: int = 1000
    n_stratified: int = 32
    n_guided: int = 32
    lambda_depth: float = 1.0 / 3.0
    gamma: float = 1.0
    m_shift: float = 1e-4
    weight_power: int = 1
    reduction: str = "sum"
    corr_constant: Optional[float] = None
    n_freq_pos: int = 10
    n_freq_dir: int = 4
    width: int = 64
    depth: int = 4
    skip: int = 2
    activation: str = "relu"
    seed: int = 0
    variant: str = "full"
    sampling: str = "auto"
    sparse_fraction: float = 0.02
    replacement: bool = True
    log_period: int = 10
    checkpoint_period: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    preset: str = "desk"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations", f"must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay", f"must be in (0, 1], got {self.lr_decay}")
        if self.n_stratified < 1:
            raise ConfigError("n_stratified", f"must be >= 1, got {self.n_stratified}")
        if self.n_guided < 0:
            raise ConfigError("n_guided", f"must be >= 0, got {self.n_guided}")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError("sampling", f"must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.preset not in PRESETS:
            raise ConfigError("preset", f"must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if not 0 < self.sparse_fraction <= 1:
            raise ConfigError("sparse_fraction", f"must be in (0, 1], got {self.sparse_fraction}")
        if self.log_period < 1:
            raise ConfigError("log_period", f"must be >= 1, got {self.log_period}")
        if self.checkpoint_period < 1:
            raise ConfigError("checkpoint_period", f"must be >= 1, got {self.checkpoint_period}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError("reduction", f"must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.weight_power not in (1, 2):
            raise ConfigError("weight_power", f"must be 1 or 2, got {self.weight_power}")
        # sub-configs validate their own keys
        try:
            self.field
        except ValueError as exc:
            raise ConfigError(str(exc).split()[0], str(exc))
        try:
            self.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc).split()[0], str(exc))

    @property
    def field(self) -> FieldConfig:
        return FieldConfig(
            n_freq_pos=self.n_freq_pos,
            n_freq_dir=self.n_freq_dir,
            width=self.width,
            depth=self.depth,
            skip=self.skip,
            activation=self.activation,
        )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_depth=self.lambda_depth, gamma=self.gamma, m_shift=self.m_shift)

    @property
    def uses_priors(self) -> bool:
        return self.variant != "nerf"

    @property
    def sampling_strategy(self) -> str:
        """auto: importance resampling for nerf, sparse_depth and dense_satnerf, prior-guided for the others."""
        if self.sampling != "auto":
            return self.sampling
        return "hierarchical" if self.variant in ("nerf", "sparse_depth", "dense_satnerf") else "guided"

    def to_values(self) -> Dict[str, object]:
        values = {}
        for key, value in asdict(self).items():
            if value is None:
                continue
            values[key] = value
        return values


PRESETS = {
    "desk": {},
    "full": {
        "iterations": 30000,
        "batch_size": 1024,
        "lr": 1e-5,
        "decay_period": 10000,
        "n_stratified": 64,
        "n_guided": 64,
        "width": 256,
        "depth": 8,
        "skip": 4,
        "checkpoint_period": 5000,
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce_field(key: str, raw: str):
    if key == "corr_constant":
        return None if raw.strip().lower() in ("", "none") else coerce(key, raw, float)
    return coerce(key, raw, _FIELD_TYPES[key])


def config_from_values(values: Dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from raw key=value strings; `preset` applies first, other keys override it."""
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(unknown[0], "unknown config key")
    preset = values.get("preset", "desk").strip()
    if preset not in PRESETS:
        raise ConfigError("preset", f"must be one of {sorted(PRESETS)}, got {preset!r}")
    merged = dict(PRESETS[preset], preset=preset)
    for key, raw in values.items():
        if key != "preset":
            merged[key] = _coerce_field(key, str(raw))
    return TrainConfig(**merged)


def load_train_config(path=None, overrides: Dict[str, str] = None) -> TrainConfig:
    values = read_key_values(path) if path else {}
    values.update(overrides or {})
    return config_from_values(values)


def save_run_file(path, cfg: TrainConfig, extra: Dict[str, object] = None):
    values = {key: (str(value).lower() if isinstance(value, bool) else value) for key, value in cfg.to_values().items()}
    values.update(extra or {})
    write_key_values(path, values, header="training run")


def load_run_file(path):
    """Returns (TrainConfig, extra entries such as dataset path)."""
    values = read_key_values(path)
    extra = {key: values.pop(key) for key in list(values) if key not in _FIELD_TYPES}
    return config_from_values(values), extra


# ==========================================================
# RAY POOL / BATCHES
# ==========================================================
@dataclass
class RayPool:
    """Every train pixel whose ray meets the envelope, with its target color and gated prior."""
    rays: RayBundle
    target: np.ndarray       # (P, 3)
    prior: DepthPrior        # depth (P,), corr (P,) already variant-gated, valid (P,)
    sigma: np.ndarray        # (P,) prior uncertainty
    view_index: np.ndarray
    pixel_index: np.ndarray

    def __len__(self):
        return len(self.rays)


@dataclass
class RayBatch:
    rays: RayBundle
    target: np.ndarray
    prior: DepthPrior
    sigma: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.rays)

    def chunk(self, start: int, stop: int) -> "RayBatch":
        sl = slice(start, stop)
        prior = DepthPrior(self.prior.depth[sl], self.prior.corr[sl], self.prior.valid[sl])
        return RayBatch(self.rays.subset(sl), self.target[sl], prior, self.sigma[sl], self.index[sl])


def gate_prior(prior: DepthPrior, cfg: TrainConfig, rng) -> DepthPrior:
    """Variant ladder: which prior pixels supervise and with what correlation."""
    depth = np.asarray(prior.depth, dtype=np.float64)
    valid = np.asarray(prior.valid, dtype=bool) & (depth > 0)
    if cfg.variant == "nerf":
        return DepthPrior(depth, np.zeros_like(depth), np.zeros_like(valid))
    if cfg.variant == "sparse_depth":
        keep = rng.random(valid.shape) < cfg.sparse_fraction
        return DepthPrior(depth, np.ones_like(depth), valid & keep)
    if cfg.variant in ("dense_satnerf", "dense_nocorr"):
        constant = 1.0 if cfg.corr_constant is None else cfg.corr_constant
        return DepthPrior(depth, resolve_correlation(prior.corr, constant), valid)
    return DepthPrior(depth, resolve_correlation(prior.corr, cfg.corr_constant), valid)


def build_ray_pool(dataset, priors: Optional[Dict[str, DepthPrior]], cfg: TrainConfig) -> RayPool:
    from dataset import DatasetError

    if cfg.uses_priors and not priors:
        raise DatasetError(f"variant {cfg.variant} needs depth priors")
    parts = []
    for view_index, view in enumerate(dataset.train_views()):
        camera = view.camera
        bundle, hit = pixel_rays(camera, camera.pixel_centers(), dataset.envelope)
        if not np.all(hit):
            logger.warning(f"{view.name}: {int((~hit).sum())} pixel rays miss the envelope and are skipped")
        keep = np.flatnonzero(hit)
        if priors and view.name in priors:
            raw = priors[view.name]
            prior = DepthPrior(raw.depth.ravel()[keep], raw.corr.ravel()[keep], raw.valid.ravel()[keep])
        elif cfg.uses_priors:
            raise DatasetError(f"no prior for train view {view.name!r}")
        else:
            prior = DepthPrior(np.full(keep.size, -1.0), np.zeros(keep.size), np.zeros(keep.size, dtype=bool))
        parts.append((view_index, keep, bundle.subset(keep), view.image.reshape(-1, 3)[keep], prior))

    if not parts or sum(p[1].size for p in parts) == 0:
        raise DatasetError("no train pixel sees the scene envelope")

    rays = RayBundle(
        np.concatenate([p[2].origins for p in parts]),
        np.concatenate([p[2].directions for p in parts]),
        np.concatenate([p[2].near for p in parts]),
        np.concatenate([p[2].far for p in parts]),
    )
    raw = DepthPrior(
        np.concatenate([p[4].depth for p in parts]),
        np.concatenate([p[4].corr for p in parts]),
        np.concatenate([p[4].valid for p in parts]),
    )
    gated = gate_prior(raw, cfg, np.random.default_rng([cfg.seed, _STREAM_SPARSE]))
    sigma = prior_uncertainty(gated.corr, cfg.gamma, cfg.m_shift)
    pool = RayPool(
        rays=rays,
        target=np.concatenate([p[3] for p in parts]).astype(np.float64),
        prior=gated,
        sigma=sigma,
        view_index=np.concatenate([np.full(p[1].size, p[0]) for p in parts]),
        pixel_index=np.concatenate([p[1] for p in parts]),
    )
    logger.info(f"Ray pool: {len(pool)} rays, {int(gated.valid.sum())} with depth supervision ({cfg.variant})")
    return pool


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, _STREAM_BATCH])


def chunk_rng(seed: int, step: int, chunk: int, stream: int = _STREAM_CHUNK) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream, chunk])


def build_ray_batch(pool: RayPool, batch_size: int, rng, replace: bool = True) -> RayBatch:
    """Uniform pixels over all train views."""
    if len(pool) == 0:
        raise ValueError("empty ray pool")
    if replace:
        index = rng.integers(0, len(pool), size=batch_size)
    else:
        if batch_size > len(pool):
            raise ValueError(f"batch of {batch_size} without replacement from {len(pool)} rays")
        index = rng.permutation(len(pool))[:batch_size]
    prior = DepthPrior(pool.prior.depth[index], pool.prior.corr[index], pool.prior.valid[index])
    return RayBatch(pool.rays.subset(index), pool.target[index], prior, pool.sigma[index], index)


# ==========================================================
# RENDER PIPELINE
# ==========================================================
@dataclass
class RenderPass:
    result: object
    composite_cache: object
    field_cache: object
    samples: object


def _evaluate(params, fcfg: FieldConfig, envelope: SceneEnvelope, rays: RayBundle, t: np.ndarray):
    points = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
    x = envelope.normalize(points.reshape(-1, 3))
    d = np.repeat(rays.directions, t.shape[1], axis=0)
    return field_forward(params, x, d, fcfg)


def render_rays(params, cfg: TrainConfig, envelope: SceneEnvelope, rays: RayBundle, rng, mode: str = "test",
                prior: DepthPrior = None, sigma: np.ndarray = None) -> RenderPass:
    """
    Stratified group first; then either the guided group (prior in train mode
    where valid, otherwise the stratified-only prediction) or importance
    samples from the stratified weights. One network evaluates the merged set.
    """
    fcfg = cfg.field
    t_strat = np.atleast_2d(stratified_samples(rays, cfg.n_stratified, rng))
    strategy = cfg.sampling_strategy

    if cfg.n_guided == 0:
        samples = merge_groups(rays, [(t_strat, GROUP_STRATIFIED)])
    else:
        has_prior = mode == "train" and prior is not None and strategy == "guided"
        needs_pass = strategy == "hierarchical" or not has_prior or not np.all(prior.valid)
        coarse = None
        if needs_pass:
            coarse_set = merge_groups(rays, [(t_strat, GROUP_STRATIFIED)])
            outputs, _ = _evaluate(params, fcfg, envelope, rays, coarse_set.t)
            coarse, _ = composite(coarse_set, outputs)
        if strategy == "hierarchical":
            fine = importance_samples(rays, coarse_set.t, coarse.weights, cfg.n_guided, rng)
            samples = merge_groups(rays, [(coarse_set.t, GROUP_STRATIFIED), (np.atleast_2d(fine), GROUP_GUIDED)])
        else:
            predicted = (coarse.depth, coarse.std) if coarse is not None else None
            prior_arg = (prior.depth, sigma, prior.valid) if has_prior else None
            samples = two_group_samples(
                rays, cfg.n_stratified, cfg.n_guided, prior=prior_arg, predicted=predicted,
                mode=mode, rng=rng, stratified=t_strat,
            )

    outputs, field_cache = _evaluate(params, fcfg, envelope, rays, samples.t)
    result, cache = composite(samples, outputs)
    return RenderPass(result, cache, field_cache, samples)


def chunk_loss(params, cfg: TrainConfig, envelope: SceneEnvelope, batch: RayBatch, step: int, chunk: int, scale: float):
    """Losses and weight gradients for one chunk of a batch."""
    rng = chunk_rng(cfg.seed, step, chunk)
    rp = render_rays(params, cfg, envelope, batch.rays, rng, mode="train", prior=batch.prior, sigma=batch.sigma)
    result = rp.result

    color, d_rgb = color_loss(result.rgb, batch.target, scale)
    depth, d_depth, active = 0.0, None, np.zeros(len(batch), dtype=bool)
    if cfg.uses_priors:
        depth, d_depth, active = depth_loss(
            result.depth, batch.prior.depth, batch.prior.corr, result.std, batch.sigma,
            batch.prior.valid, cfg.weight_power, scale,
        )
        d_depth = d_depth * cfg.lambda_depth

    d_sigma, d_sample_rgb = composite_backward(rp.composite_cache, d_rgb=d_rgb, d_depth=d_depth)
    grads = field_backward(params, rp.field_cache, d_sigma.reshape(-1), d_sample_rgb.reshape(-1, 3), cfg.field)
    losses = {"color_loss": color, "depth_loss": depth, "active_rays": float(active.sum())}
    return losses, grads


def split_chunks(batch: RayBatch, chunk_size: int = None) -> List:
    chunk_size = SPSNERF_CHUNK if chunk_size is None else chunk_size
    return [(i, batch.chunk(start, start + chunk_size)) for i, start in enumerate(range(0, len(batch), chunk_size))]


def train_step(params, batch: RayBatch, cfg: TrainConfig, envelope: SceneEnvelope, step: int = None,
               threads: int = None, chunk_size: int = None) -> Dict[str, float]:
    """
    One optimizer step on `batch`. `step` (1-based) keys the sample draws and
    defaults to params.step + 1. Returns loss components and the lr used.
    """
    if len(batch) == 0:
        raise ValueError("train_step needs a non-empty batch")
    step = params.step + 1 if step is None else step
    scale = reduction_scale(cfg.reduction, len(batch))
    losses = forward_backward(
        params,
        split_chunks(batch, chunk_size),
        lambda p, item: chunk_loss(p, cfg, envelope, item[1], step, item[0], scale),
        threads,
    )
    lr = decayed_lr(cfg.lr, cfg.lr_decay, cfg.decay_period, step - 1)
    adam_step(params, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, step=step)
    losses["total_loss"] = total_loss(losses["color_loss"], losses["depth_loss"], cfg.lambda_depth)
    losses["lr"] = lr
    return losses


# ==========================================================
# TRAIN LOOP
# ==========================================================
def new_params(cfg: TrainConfig, dtype=np.float32):
    return init_params(cfg.field, np.random.default_rng([cfg.seed, _STREAM_INIT]), dtype)


def _write_log(out_dir, rows):
    pd.DataFrame(rows, columns=["step", "color_loss", "depth_loss", "lr"]).to_csv(os.path.join(out_dir, LOG_FILE), index=False)


def train(dataset, priors, cfg: TrainConfig, out_dir, resume: bool = False, threads: int = None):
    """
    Run cfg.iterations optimizer steps. Writes run.txt, train_log.csv
    (step, color_loss, depth_loss, lr every log_period steps and at the last
    step) and checkpoints. Returns (params, log DataFrame).
    """
    os.makedirs(out_dir, exist_ok=True)
    pool = build_ray_pool(dataset, priors, cfg)
    last_path = os.path.join(out_dir, LAST_CHECKPOINT)

    rows = []
    if resume and os.path.isfile(last_path):
        params = load_checkpoint(last_path)
        log_path = os.path.join(out_dir, LOG_FILE)
        if os.path.isfile(log_path):
            previous = pd.read_csv(log_path)
            rows = previous[previous["step"] <= params.step].to_dict("records")
        logger.info(f"Resuming from {last_path} at step {params.step}")
    else:
        if resume:
            logger.warning(f"No checkpoint in {out_dir}; starting fresh")
        params = new_params(cfg)
    save_run_file(os.path.join(out_dir, RUN_FILE), cfg, {"dataset": os.path.abspath(dataset.root)})

    quiet = LOG_LEVEL == "DEBUG" or not sys.stderr.isatty()
    start = params.step
    for step in trange(start + 1, cfg.iterations + 1, desc=f"train {cfg.variant}", disable=quiet):
        batch = build_ray_batch(pool, cfg.batch_size, batch_rng(cfg.seed, step), cfg.replacement)
        try:
            losses = train_step(params, batch, cfg, dataset.envelope, step=step, threads=threads)
        except NonFiniteError as exc:
            logger.error(f"Step {step}: {exc}; last checkpoint kept at {last_path}")
            _write_log(out_dir, rows)
            raise
        logger.debug(
            f"step {step}: color={losses['color_loss']:.6f} depth={losses['depth_loss']:.6f} "
            f"active={int(losses['active_rays'])} lr={losses['lr']:.3g}"
        )
        if step % cfg.log_period == 0 or step == cfg.iterations:
            rows.append({"step": step, "color_loss": losses["color_loss"], "depth_loss": losses["depth_loss"], "lr": losses["lr"]})
        if step % cfg.checkpoint_period == 0:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{step:06d}.spsc"), params)
            save_checkpoint(last_path, params)
            _write_log(out_dir, rows)

    save_checkpoint(last_path, params)
    _write_log(out_dir, rows)
    logger.info(f"Training {cfg.variant} finished at step {params.step}; checkpoint {last_path} ✅")
    return params, pd.DataFrame(rows, columns=["step", "color_loss", "depth_loss", "lr"])


# ==========================================================
# RENDERING A VIEW
# ==========================================================
def render_bundle(params, cfg: TrainConfig, envelope: SceneEnvelope, rays: RayBundle, seed: int = None,
                  threads: int = None, chunk_size: int = None):
    """Test-mode render of many rays; returns (rgb (R, 3), depth (R,), opacity (R,))."""
    seed = cfg.seed if seed is None else seed
    chunk_size = SPSNERF_CHUNK if chunk_size is None else chunk_size
    starts = list(range(0, len(rays), chunk_size))

    def run(item):
        index, begin = item
        rp = render_rays(params, cfg, envelope, rays.subset(slice(begin, begin + chunk_size)),
                         chunk_rng(seed, 0, index, _STREAM_RENDER), mode="test")
        return rp.result.rgb, rp.result.depth, rp.result.opacity

    parts = run_parallel(run, list(enumerate(starts)), threads)
    if not parts:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def render_view(params, cfg: TrainConfig, camera: Camera, envelope: SceneEnvelope, seed: int = None, threads: int = None):
    """(rgb (H, W, 3), depth (H, W)); pixels whose ray misses the envelope are black with depth -1."""
    bundle, hit = pixel_rays(camera, camera.pixel_centers(), envelope)
    rgb = np.zeros((len(bundle), 3))
    depth = np.full(len(bundle), -1.0)
    idx = np.flatnonzero(hit)
    if idx.size:
        rgb[idx], depth[idx], _ = render_bundle(params, cfg, envelope, bundle.subset(idx), seed, threads)
    shape = (camera.height, camera.width)
    return np.clip(rgb, 0.0, 1.0).reshape(shape + (3,)), depth.reshape(shape)


def load_run(checkpoint_path):
    """Checkpoint plus the run.txt written next to it."""
    run_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), RUN_FILE)
    if not os.path.isfile(run_path):
        raise ConfigError(RUN_FILE, f"no run file next to {checkpoint_path}")
    cfg, extra = load_run_file(run_path)
    params = load_checkpoint(checkpoint_path)
    return params, cfg, extra


# ==========================================================
# COMMANDS
# ==========================================================
def _parse_overrides(items) -> Dict[str, str]:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "override must be key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_train(args):
    from dataset import load_dataset, load_priors

    overrides = _parse_overrides(args.set)
    if args.variant:
        overrides["variant"] = args.variant
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_train_config(args.config, overrides)
    if cfg.uses_priors and not args.priors:
        raise ConfigError("priors", f"variant {cfg.variant} needs --priors")

    dataset = load_dataset(args.dataset)
    priors = load_priors(args.priors, dataset) if (args.priors and cfg.uses_priors) else None
    train(dataset, priors, cfg, args.out, resume=args.resume)
    return 0


def cmd_render(args):
    from dataset import load_dataset

    params, cfg, extra = load_run(args.checkpoint)
    dataset = load_dataset(args.dataset or extra.get("dataset"))
    view = dataset.view(args.view)
    rgb, depth = render_view(params, cfg, view.camera, dataset.envelope, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_png(os.path.join(args.out, f"{view.name}_render.png"), rgb)
    write_flt(os.path.join(args.out, f"{view.name}_render_depth.flt"), depth)
    logger.info(f"Rendered {view.name} to {args.out} ✅")
    return 0


def cmd_ablate(args):
    from dataset import load_dataset, load_priors
    from metrics_dsm import evaluate_run

    base = load_train_config(args.config, _parse_overrides(args.set))
    dataset = load_dataset(args.dataset)
    priors = load_priors(args.priors, dataset)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = []
    for variant in variants:
        cfg = replace(base, variant=variant.strip())
        run_dir = os.path.join(args.out, cfg.variant)
        params, _ = train(dataset, priors if cfg.uses_priors else None, cfg, run_dir)
        report = evaluate_run(params, cfg, dataset, priors, gsd=args.gsd, out_dir=run_dir)
        rows.append({"variant": cfg.variant, **report})
        logger.info(f"{cfg.variant}: psnr={report['psnr']:.2f} ssim={report['ssim']:.3f} mae_in={report['mae_in']}")
    table = pd.DataFrame(rows)
    path = os.path.join(args.out, "ablation.csv")
    table.to_csv(path, index=False)
    logger.info(f"Ablation table written to {path} ✅")
    return 0


def register_trainer_commands(subparsers):
    parser = subparsers.add_parser("train", help="optimize a field on a dataset")
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--priors")
    parser.add_argument("--config")
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--resume", action="store_true")
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_train)

    parser = subparsers.add_parser("render", help="render a view from a checkpoint")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--view", required=True)
    parser.add_argument("--dataset", help="defaults to the dataset recorded in run.txt")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_render)

    parser = subparsers.add_parser("ablate", help="train every variant and tabulate metrics")
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--priors", required=True)
    parser.add_argument("--config")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE")
    parser.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    parser.add_argument("--gsd", type=float, default=2.0)
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_ablate)
