"""
Sampler Module

Responsibilities:
- Stratified samples over [t_n, t_f]
- Gaussian (guided) samples around a prior or predicted depth, clipped to the ray
- Two-group sets: stratified group merged with the guided group
- Weights-proportional resampling (hierarchical baseline)

Every function works on a single Ray (scalar near/far) or a RayBundle
(arrays of shape (R,)); depths come back as (n,) or (R, n).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Spacing given to the last sample so it can absorb the remaining transmittance
FAR_SENTINEL = 1e10

# Minimum gap enforced between consecutive depths
DUPLICATE_JITTER = 1e-6

GROUP_STRATIFIED = 0
GROUP_GUIDED = 1


@dataclass
class RaySampleSet:
    t: np.ndarray       # (R, N) strictly increasing depths, m
    delta: np.ndarray   # (R, N) spacings, last = FAR_SENTINEL
    group: np.ndarray   # (R, N) GROUP_STRATIFIED | GROUP_GUIDED

    @property
    def n_samples(self) -> int:
        return self.t.shape[-1]


def _bounds(ray):
    near = np.atleast_1d(np.asarray(ray.near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(ray.far, dtype=np.float64))
    return near, far, np.ndim(ray.near) == 0


def _squeeze(t, scalar):
    return t[0] if scalar else t


# -----------------------------
# Stratified
# -----------------------------
def stratified_samples(ray, n: int, rng) -> np.ndarray:
    """One uniform draw in each of n equal bins of [t_n, t_f]; sorted by construction."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    near, far, scalar = _bounds(ray)
    u = np.asarray(rng.random((len(near), n)), dtype=np.float64)
    t = near[:, None] + (far - near)[:, None] * (np.arange(n) + u) / n
    return _squeeze(t, scalar)


# -----------------------------
# Guided
# -----------------------------
def guided_samples(ray, n: int, mean, std, rng) -> np.ndarray:
    """n draws from N(mean, std^2), clipped to [t_n, t_f] and sorted."""
    near, far, scalar = _bounds(ray)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), near.shape)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), near.shape)
    if np.any(std <= 0):
        raise ValueError("guided sampling needs std > 0")
    draws = mean[:, None] + std[:, None] * np.asarray(rng.standard_normal((len(near), n)), dtype=np.float64)
    t = np.sort(np.clip(draws, near[:, None], far[:, None]), axis=-1)
    return _squeeze(t, scalar)


# -----------------------------
# Hierarchical baseline
# -----------------------------
def importance_samples(ray, t: np.ndarray, weights: np.ndarray, n: int, rng) -> np.ndarray:
    """
    Inverse-CDF resampling of n depths proportional to coarse compositing
    weights, over bins bounded by the midpoints of t (and the ray bounds).
    """
    near, far, scalar = _bounds(ray)
    t = np.atleast_2d(t)
    weights = np.atleast_2d(weights).astype(np.float64) + 1e-5
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    edges = np.concatenate([near[:, None], mids, far[:, None]], axis=1)
    pdf = weights / weights.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(near), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = np.asarray(rng.random((len(near), n)), dtype=np.float64)
    # searchsorted(side="right") row by row
    idx = np.sum(u[:, :, None] >= cdf[:, None, :], axis=-1)
    below = np.clip(idx - 1, 0, cdf.shape[1] - 1)
    above = np.clip(idx, 0, cdf.shape[1] - 1)
    cdf_lo = np.take_along_axis(cdf, below, axis=1)
    cdf_hi = np.take_along_axis(cdf, above, axis=1)
    edge_lo = np.take_along_axis(edges, below, axis=1)
    edge_hi = np.take_along_axis(edges, above, axis=1)
    denom = cdf_hi - cdf_lo
    denom = np.where(denom < 1e-5, 1.0, denom)
    samples = edge_lo + (u - cdf_lo) / denom * (edge_hi - edge_lo)
    samples = np.sort(np.clip(samples, near[:, None], far[:, None]), axis=-1)
    return _squeeze(samples, scalar)


# -----------------------------
# Merging
# -----------------------------
def separate_duplicates(t: np.ndarray, near, far, eps: float = DUPLICATE_JITTER) -> np.ndarray:
    """
    Make sorted depths strictly increasing with gaps >= eps while staying in
    [near, far]. Requires far - near >= (N - 1) * eps.
    """
    t = np.atleast_2d(t)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    ramp = np.arange(t.shape[-1]) * eps
    lifted = np.maximum.accumulate(t - ramp, axis=-1) + ramp
    ceiling = far[:, None] - ramp[::-1]
    return np.maximum(np.minimum(lifted, ceiling), near[:, None])


def spacings(t: np.ndarray) -> np.ndarray:
    delta = np.empty_like(t)
    delta[..., :-1] = t[..., 1:] - t[..., :-1]
    delta[..., -1] = FAR_SENTINEL
    return delta


def merge_groups(ray, groups) -> RaySampleSet:
    """Merge (depths, tag) groups into one sorted, strictly increasing set."""
    near, far, _ = _bounds(ray)
    t = np.concatenate([np.atleast_2d(depths) for depths, _ in groups], axis=1)
    tags = np.concatenate([np.full(np.atleast_2d(depths).shape, tag, dtype=np.int8) for depths, tag in groups], axis=1)
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    tags = np.take_along_axis(tags, order, axis=1)
    t = separate_duplicates(t, near, far)
    return RaySampleSet(t=t, delta=spacings(t), group=tags)


def two_group_samples(
    ray,
    n1: int,
    n2: int,
    prior: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    predicted: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    mode: str = "train",
    rng=None,
    stratified: Optional[np.ndarray] = None,
) -> RaySampleSet:
    """
    Stratified group of n1 merged with a guided group of n2.

    prior     = (mean, std, valid): used as the guided center in train mode
                where valid.
    predicted = (mean, std) from a stratified-only pass: used in test mode and
                for train rays without a valid prior.
    `stratified` reuses an already drawn first group.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if n1 < 0 or n2 < 0:
        raise ValueError("group sizes must be >= 0")
    near, far, scalar = _bounds(ray)
    count = len(near)

    groups = []
    if n1 > 0:
        first = stratified if stratified is not None else stratified_samples(ray, n1, rng)
        groups.append((np.atleast_2d(first), GROUP_STRATIFIED))

    if n2 > 0:
        mean = np.full(count, np.nan)
        std = np.full(count, np.nan)
        if predicted is not None:
            mean = np.broadcast_to(np.asarray(predicted[0], dtype=np.float64), (count,)).copy()
            std = np.broadcast_to(np.asarray(predicted[1], dtype=np.float64), (count,)).copy()
        if prior is not None and mode == "train":
            valid = np.broadcast_to(np.asarray(prior[2], dtype=bool), (count,))
            mean = np.where(valid, np.asarray(prior[0], dtype=np.float64), mean)
            std = np.where(valid, np.asarray(prior[1], dtype=np.float64), std)
        if np.any(np.isnan(mean)) or np.any(np.isnan(std)):
            raise ValueError("guided samples requested for rays with neither a valid prior nor a predicted depth")
        groups.append((guided_samples(ray, n2, mean, std, rng), GROUP_GUIDED))

    if not groups:
        raise ValueError("two_group_samples needs n1 + n2 >= 1")
    samples = merge_groups(ray, groups)
    if scalar:
        return RaySampleSet(samples.t[0], samples.delta[0], samples.group[0])
    return samples
