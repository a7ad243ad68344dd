"""
Field Module

Responsibilities:
- FieldConfig (encoding frequencies, width, depth, skip layer, activation)
- Positional encoding
- The coordinate network F(x, d) = (c, sigma), forward and backward

Positions are expected already normalized to [-1, 1]^3 by the scene envelope.
Density only sees position features; view direction enters after the
density head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from autodiff import (
    ParamStore,
    activation_backward,
    activation_forward,
    check_finite,
    dense_backward,
    dense_forward,
    sigmoid,
    sigmoid_backward,
    softplus,
    softplus_backward,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sine")


@dataclass(frozen=True)
class FieldConfig:
    n_freq_pos: int = 10
    n_freq_dir: int = 4
    width: int = 128
    depth: int = 4
    skip: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.n_freq_pos < 1:
            raise ValueError(f"n_freq_pos must be >= 1, got {self.n_freq_pos}")
        if self.n_freq_dir < 0:
            raise ValueError(f"n_freq_dir must be >= 0, got {self.n_freq_dir}")
        if self.width < 8:
            raise ValueError(f"width must be >= 8, got {self.width}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if not 0 <= self.skip < self.depth:
            raise ValueError(f"skip must be in [0, depth), got {self.skip}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def pos_dim(self) -> int:
        return 2 * 3 * self.n_freq_pos

    @property
    def dir_dim(self) -> int:
        return 2 * 3 * self.n_freq_dir

    @property
    def view_width(self) -> int:
        return max(self.width // 2, 4)


@dataclass
class FieldOutput:
    rgb: np.ndarray    # (M, 3) in [0, 1]
    sigma: np.ndarray  # (M,) >= 0


# -----------------------------
# Positional encoding
# -----------------------------
def positional_encode(v: np.ndarray, n_freq: int) -> np.ndarray:
    """
    [sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]
    per frequency, each block spanning all k input components: (..., 2*k*L).
    """
    v = np.asarray(v)
    if n_freq == 0:
        return np.zeros(v.shape[:-1] + (0,), dtype=v.dtype)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    scaled = v[..., None, :] * freqs.astype(v.dtype)[:, None]
    enc = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)
    return enc.reshape(v.shape[:-1] + (2 * v.shape[-1] * n_freq,))


# -----------------------------
# Parameters
# -----------------------------
def _layer_inputs(cfg: FieldConfig, layer: int) -> int:
    if layer == 0:
        return cfg.pos_dim
    if layer == cfg.skip:
        return cfg.width + cfg.pos_dim
    return cfg.width


def init_params(cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """He-uniform weights, zero biases."""
    params = ParamStore(dtype)

    def dense(name, fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        params.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"{name}.bias", np.zeros(fan_out))

    for layer in range(cfg.depth):
        dense(f"layer{layer}", _layer_inputs(cfg, layer), cfg.width)
    dense("sigma", cfg.width, 1)
    dense("feature", cfg.width, cfg.width)
    dense("view", cfg.width + cfg.dir_dim, cfg.view_width)
    dense("rgb", cfg.view_width, 3)
    logger.debug(f"Field initialised with {params.num_values()} weights")
    return params


# -----------------------------
# Forward / backward
# -----------------------------
@dataclass
class FieldCache:
    enc_x: np.ndarray
    enc_d: np.ndarray
    layer_inputs: List[np.ndarray]
    layer_pre: List[np.ndarray]
    trunk: np.ndarray
    sigma_pre: np.ndarray
    view_input: np.ndarray
    view_pre: np.ndarray
    view_hidden: np.ndarray
    rgb: np.ndarray


def field_forward(params: ParamStore, x: np.ndarray, d: np.ndarray, cfg: FieldConfig):
    """Batched F(x, d). x, d: (M, 3). Returns (FieldOutput, FieldCache)."""
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype).reshape(-1, 3)
    d = np.asarray(d, dtype=dtype).reshape(-1, 3)
    enc_x = positional_encode(x, cfg.n_freq_pos)
    enc_d = positional_encode(d, cfg.n_freq_dir)

    h = enc_x
    inputs, pres = [], []
    for layer in range(cfg.depth):
        inp = np.concatenate([h, enc_x], axis=1) if (layer == cfg.skip and layer > 0) else h
        z = dense_forward(inp, params[f"layer{layer}.weight"], params[f"layer{layer}.bias"])
        check_finite(z, f"layer{layer}")
        inputs.append(inp)
        pres.append(z)
        h = activation_forward(cfg.activation, z)

    sigma_pre = dense_forward(h, params["sigma.weight"], params["sigma.bias"])[:, 0]
    check_finite(sigma_pre, "sigma")
    sigma = softplus(sigma_pre)

    feature = dense_forward(h, params["feature.weight"], params["feature.bias"])
    view_input = np.concatenate([feature, enc_d], axis=1)
    view_pre = dense_forward(view_input, params["view.weight"], params["view.bias"])
    check_finite(view_pre, "view")
    view_hidden = activation_forward(cfg.activation, view_pre)
    rgb = sigmoid(dense_forward(view_hidden, params["rgb.weight"], params["rgb.bias"]))
    check_finite(rgb, "rgb")

    cache = FieldCache(enc_x, enc_d, inputs, pres, h, sigma_pre, view_input, view_pre, view_hidden, rgb)
    return FieldOutput(rgb=rgb, sigma=sigma), cache


def field_backward(params: ParamStore, cache: FieldCache, d_sigma: np.ndarray, d_rgb: np.ndarray, cfg: FieldConfig) -> Dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every field weight, given dL/dsigma (M,) and dL/drgb (M, 3)."""
    grads = {}
    dtype = params.dtype
    d_sigma = np.asarray(d_sigma, dtype=dtype).reshape(-1, 1)
    d_rgb = np.asarray(d_rgb, dtype=dtype).reshape(-1, 3)

    d_rgb_pre = sigmoid_backward(cache.rgb, d_rgb)
    d_hidden, grads["rgb.weight"], grads["rgb.bias"] = dense_backward(cache.view_hidden, params["rgb.weight"], d_rgb_pre)
    d_view_pre = activation_backward(cfg.activation, cache.view_pre, d_hidden)
    d_view_in, grads["view.weight"], grads["view.bias"] = dense_backward(cache.view_input, params["view.weight"], d_view_pre)
    d_feature = d_view_in[:, :cfg.width]
    d_trunk, grads["feature.weight"], grads["feature.bias"] = dense_backward(cache.trunk, params["feature.weight"], d_feature)

    d_sigma_pre = softplus_backward(cache.sigma_pre[:, None], d_sigma)
    d_from_sigma, grads["sigma.weight"], grads["sigma.bias"] = dense_backward(cache.trunk, params["sigma.weight"], d_sigma_pre)
    dh = d_trunk + d_from_sigma

    for layer in reversed(range(cfg.depth)):
        dz = activation_backward(cfg.activation, cache.layer_pre[layer], dh)
        d_inp, grads[f"layer{layer}.weight"], grads[f"layer{layer}.bias"] = dense_backward(
            cache.layer_inputs[layer], params[f"layer{layer}.weight"], dz
        )
        if layer == 0:
            break
        # skip layers also receive the encoding, which needs no gradient
        dh = d_inp[:, :cfg.width]
    return grads


def field_eval(params: ParamStore, x: np.ndarray, d: np.ndarray, cfg: FieldConfig) -> FieldOutput:
    """F(x, d) for one point or a batch; no cache kept."""
    output, _ = field_forward(params, x, d, cfg)
    return output
