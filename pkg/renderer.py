"""
Renderer Module

Alpha compositing of color, depth and depth spread along each ray:

    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = prod_{j<i} (1 - alpha_j),  T_1 = 1
    w_i     = T_i alpha_i
    C = sum w_i c_i,  D = sum w_i t_i,  S^2 = sum w_i (t_i - D)^2

No background term: transmittance left over after the last sample leaves C
short of 1. The sampler's far sentinel lets the last sample close the ray.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# S^2 floor before the square root
VARIANCE_FLOOR = 1e-12


@dataclass
class RenderResult:
    rgb: np.ndarray       # C, (R, 3)
    depth: np.ndarray     # D, (R,)
    std: np.ndarray       # S, (R,)
    weights: np.ndarray   # w_i, (R, N)
    opacity: np.ndarray   # A = sum w_i, (R,)


@dataclass
class CompositeCache:
    t: np.ndarray
    delta: np.ndarray
    sample_rgb: np.ndarray
    weights: np.ndarray
    transmittance_next: np.ndarray  # T_{i+1} = T_i (1 - alpha_i)
    variance: np.ndarray
    result: RenderResult


def alpha(sigma, delta):
    """1 - exp(-sigma delta), via expm1 for small products."""
    return -np.expm1(-np.asarray(sigma) * np.asarray(delta))


def _accumulate(weights, t, sample_rgb) -> RenderResult:
    rgb = np.einsum("rn,rnc->rc", weights, sample_rgb)
    depth = np.sum(weights * t, axis=-1)
    variance = np.sum(weights * (t - depth[:, None]) ** 2, axis=-1)
    std = np.sqrt(np.maximum(variance, VARIANCE_FLOOR))
    return RenderResult(rgb=rgb, depth=depth, std=std, weights=weights, opacity=weights.sum(axis=-1)), variance


def composite_alpha(t: np.ndarray, alphas: np.ndarray, sample_rgb: np.ndarray) -> RenderResult:
    """Compositing from per-sample opacities directly (prefix product of 1 - alpha)."""
    t = np.atleast_2d(t)
    alphas = np.atleast_2d(alphas)
    sample_rgb = np.asarray(sample_rgb).reshape(t.shape + (3,))
    survive = np.cumprod(1.0 - alphas, axis=-1)
    transmittance = np.concatenate([np.ones_like(survive[:, :1]), survive[:, :-1]], axis=-1)
    result, _ = _accumulate(transmittance * alphas, t, sample_rgb)
    return result


def composite(samples, outputs, dtype=None):
    """
    Composite field outputs over a RaySampleSet.
    Returns (RenderResult, CompositeCache); the cache feeds composite_backward.
    """
    dtype = np.dtype(dtype) if dtype is not None else outputs.sigma.dtype
    t = np.atleast_2d(samples.t).astype(dtype)
    delta = np.atleast_2d(samples.delta).astype(dtype)
    sigma = np.asarray(outputs.sigma, dtype=dtype).reshape(t.shape)
    sample_rgb = np.asarray(outputs.rgb, dtype=dtype).reshape(t.shape + (3,))
    if sigma.shape != t.shape:
        raise ValueError(f"{sigma.shape} field outputs for {t.shape} samples")

    tau = sigma * delta
    optical_depth = np.cumsum(tau, axis=-1)
    transmittance_next = np.exp(-optical_depth)
    # exclusive prefix; subtracting tau would cancel badly against the far sentinel
    before = np.concatenate([np.zeros_like(tau[:, :1]), optical_depth[:, :-1]], axis=-1)
    transmittance = np.exp(-before)
    weights = transmittance * -np.expm1(-tau)

    result, variance = _accumulate(weights, t, sample_rgb)
    cache = CompositeCache(t, delta, sample_rgb, weights, transmittance_next, variance, result)
    return result, cache


def composite_backward(cache: CompositeCache, d_rgb=None, d_depth=None, d_std=None):
    """
    Backward of composite. Takes dL/dC (R, 3), dL/dD (R,), dL/dS (R,) (any may
    be None) and returns (dL/dsigma (R, N), dL/dc (R, N, 3)).

    With g_i = dL/dw_i:  dL/dsigma_k = delta_k (T_{k+1} g_k - sum_{i>k} w_i g_i)
    """
    res = cache.result
    weights, t = cache.weights, cache.t
    rays = weights.shape[0]
    dtype = weights.dtype
    d_rgb = np.zeros((rays, 3), dtype=dtype) if d_rgb is None else np.asarray(d_rgb, dtype=dtype)
    d_depth = np.zeros(rays, dtype=dtype) if d_depth is None else np.asarray(d_depth, dtype=dtype)
    d_std = np.zeros(rays, dtype=dtype) if d_std is None else np.asarray(d_std, dtype=dtype)

    # S = sqrt(max(V, floor)): no gradient below the floor
    above = cache.variance > VARIANCE_FLOOR
    d_var = np.where(above, d_std * 0.5 / res.std, 0.0).astype(dtype)
    centered = t - res.depth[:, None]
    # V depends on D as well: dV/dD = -2 sum w_i (t_i - D)
    d_depth_total = d_depth + d_var * (-2.0 * np.sum(weights * centered, axis=-1))

    g = np.einsum("rnc,rc->rn", cache.sample_rgb, d_rgb) + d_depth_total[:, None] * t + d_var[:, None] * centered ** 2
    wg = weights * g
    suffix = np.flip(np.cumsum(np.flip(wg, axis=-1), axis=-1), axis=-1) - wg
    d_sigma = cache.delta * (cache.transmittance_next * g - suffix)
    d_sample_rgb = weights[:, :, None] * d_rgb[:, None, :]
    return d_sigma, d_sample_rgb
