"""
Supervision Module

Responsibilities:
- Prior uncertainty Sigma(r) = gamma (1 - corr(r)) + m
- R_sub membership (depth loss active when S > Sigma or |D - Dbar| > Sigma)
- Correlation-weighted, clipped depth loss
- Color loss over all rays
- Total objective color + lambda * depth

Loss functions return (value, gradient) so the trainer can chain them into
the renderer backward.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# -----------------------------
# Defaults
# -----------------------------
URBAN_LAMBDA = 1.0 / 3.0
RURAL_LAMBDA = 50.0 / 3.0
DEFAULT_GAMMA = 1.0
DEFAULT_M_SHIFT = 1e-4

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossWeights:
    lambda_depth: float = URBAN_LAMBDA
    gamma: float = DEFAULT_GAMMA
    m_shift: float = DEFAULT_M_SHIFT

    def __post_init__(self):
        for name in ("lambda_depth", "gamma", "m_shift"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")


@dataclass
class DepthPrior:
    """Per-pixel prior. Invalid pixels never enter the depth loss or guide sampling."""
    depth: np.ndarray
    corr: np.ndarray
    valid: np.ndarray


# -----------------------------
# Correlation / uncertainty
# -----------------------------
def clamp_correlation(corr):
    """Raw NCC lies in [-1, 1]; negative values would flip the loss weight."""
    return np.clip(corr, 0.0, 1.0)


def resolve_correlation(corr, corr_constant=None):
    """A constant correlation replaces the raster when given (coarse-DEM priors)."""
    if corr_constant is None:
        return clamp_correlation(corr)
    return np.full(np.shape(corr), float(np.clip(corr_constant, 0.0, 1.0)))


def prior_uncertainty(corr, gamma: float = DEFAULT_GAMMA, m: float = DEFAULT_M_SHIFT):
    return gamma * (1.0 - np.asarray(corr)) + m


def in_rsub(depth, prior_depth, std, sigma):
    """Strict inequalities: ties leave the loss inactive."""
    depth = np.asarray(depth)
    return (np.asarray(std) > sigma) | (np.abs(depth - np.asarray(prior_depth)) > sigma)


# -----------------------------
# Losses
# -----------------------------
def depth_loss(depth, prior_depth, corr, std, sigma, valid, weight_power: int = 1, scale: float = 1.0):
    """
    scale * sum over valid rays in R_sub of corr^p (D - Dbar)^2.
    Returns (loss, dloss/dD, active mask). Inactive rays get exactly zero
    loss and gradient.
    """
    if weight_power not in (1, 2):
        raise ValueError(f"weight_power must be 1 or 2, got {weight_power}")
    depth = np.asarray(depth)
    active = np.asarray(valid, dtype=bool) & in_rsub(depth, prior_depth, std, sigma)
    weight = np.asarray(corr, dtype=np.float64) ** weight_power
    residual = np.where(active, depth - np.asarray(prior_depth), 0.0)
    per_ray = np.where(active, weight * residual ** 2, 0.0)
    grad = np.where(active, 2.0 * scale * weight * residual, 0.0).astype(depth.dtype)
    return float(scale * per_ray.sum()), grad, active


def color_loss(rgb, target_rgb, scale: float = 1.0):
    """scale * sum over rays of ||C - Cbar||^2. Returns (loss, dloss/dC)."""
    rgb = np.asarray(rgb)
    diff = rgb - np.asarray(target_rgb, dtype=rgb.dtype)
    return float(scale * np.sum(np.asarray(diff, dtype=np.float64) ** 2)), (2.0 * scale * diff).astype(rgb.dtype)


def total_loss(color: float, depth: float, lambda_depth: float) -> float:
    return color + lambda_depth * depth


def reduction_scale(reduction: str, batch_size: int) -> float:
    """Per-ray scale for the given reduction; 'mean' divides by the whole batch."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    return 1.0 if reduction == "sum" else 1.0 / batch_size
