"""
Autodiff Module

Responsibilities:
- ParamStore: named weights, matching gradient buffers, Adam state
- Hand-written forward/backward rules for the fixed primitives
  (dense layer, ReLU, sine, softplus, sigmoid)
- forward_backward: chunked evaluation with a deterministic gradient reduction
- adam_step with bias correction, step-wise exponential lr decay
- Checkpoint codec ("SPSC")
- Central finite-difference harness used by the gradient tests
"""

import struct
import logging
from collections import OrderedDict
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
from scipy.special import expit

from utils import pairwise_sum, run_parallel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPSC"
CHECKPOINT_VERSION = 1


class NonFiniteError(RuntimeError):
    """A NaN/Inf showed up. `layer` names where."""

    def __init__(self, layer: str, detail: str = ""):
        super().__init__(f"non-finite values in {layer}" + (f" ({detail})" if detail else ""))
        self.layer = layer


class CheckpointError(ValueError):
    pass


def check_finite(array: np.ndarray, layer: str):
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(layer, f"{bad} of {np.size(array)} entries")


# ==========================================================
# PARAMETER STORE
# ==========================================================
class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        # Adam state
        self.adam_m: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.adam_v: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.step = 0

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise KeyError(f"parameter {name} already registered")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0)

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ==========================================================
# PRIMITIVES (forward / backward)
# ==========================================================
def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x W + b with W of shape (in, out)."""
    return x @ weight + bias


def dense_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dW, db)."""
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


def activation_forward(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sine":
        return np.sin(z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dy * (z > 0)
    if kind == "sine":
        return dy * np.cos(z)
    raise ValueError(f"unknown activation {kind!r}")


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, z)


def softplus_backward(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * expit(z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Takes the sigmoid output, not the pre-activation."""
    return dy * y * (1 - y)


# ==========================================================
# FORWARD / BACKWARD DRIVER
# ==========================================================
def forward_backward(
    params: ParamStore,
    batch_inputs: Sequence,
    loss_fn: Callable,
    threads: int = None,
) -> Dict[str, float]:
    """
    Evaluate loss_fn on every chunk of batch_inputs and fill params.grads.

    loss_fn(params, chunk) -> (losses: dict of scalars, grads: dict name -> array)
    Chunks may run on worker threads; losses and gradients are reduced in a
    fixed pairwise order. Parameters a chunk does not touch may be left out
    of its grads dict and receive zero.
    """
    params.zero_grad()
    results = run_parallel(lambda chunk: loss_fn(params, chunk), list(batch_inputs), threads)
    if not results:
        raise ValueError("forward_backward needs at least one chunk")

    losses = {key: float(pairwise_sum([r[0][key] for r in results])) for key in results[0][0]}
    for key, value in losses.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss:{key}", f"value {value}")

    for name in params.names():
        parts = [r[1][name] for r in results if name in r[1]]
        if parts:
            params.grads[name][...] = pairwise_sum(parts)
        check_finite(params.grads[name], f"grad:{name}")
    return losses


# ==========================================================
# OPTIMIZER
# ==========================================================
def decayed_lr(lr: float, decay: float, period: int, step: int) -> float:
    """lr * decay^(step // period); step counts completed optimizer steps."""
    if period <= 0:
        return lr
    return lr * decay ** (step // period)


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int = None,
) -> ParamStore:
    """
    One Adam update from params.grads, in place. `step` is the 1-based
    timestep used for bias correction (defaults to params.step + 1); the
    store remembers it.
    """
    t = params.step + 1 if step is None else int(step)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, value in params.params.items():
        g = params.grads[name]
        check_finite(g, f"grad:{name}")
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        value -= update.astype(value.dtype, copy=False)
    params.step = t
    return params


# ==========================================================
# CHECKPOINTS
# ==========================================================
_U32 = struct.Struct("<I")


def _pack_array(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
    parts.extend(_U32.pack(dim) for dim in array.shape)
    parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: ParamStore):
    """
    SPSC layout: magic, u32 version, u32 step, u32 array count, then per array
    u32 name length, utf-8 name, u32 ndim, u32 dims, float32 LE payload.
    Arrays: param/<name>, adam_m/<name>, adam_v/<name>.
    """
    arrays = []
    for prefix, store in (("param", params.params), ("adam_m", params.adam_m), ("adam_v", params.adam_v)):
        arrays.extend((f"{prefix}/{name}", value) for name, value in store.items())
    blob = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(params.step), _U32.pack(len(arrays))]
    blob.extend(_pack_array(name, value) for name, value in arrays)
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
    logger.debug(f"Checkpoint written to {path} at step {params.step}")


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    offset = 4

    def read_u32():
        nonlocal offset
        if offset + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated")
        (value,) = _U32.unpack_from(blob, offset)
        offset += 4
        return value

    version = read_u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    step = read_u32()
    count = read_u32()
    arrays = OrderedDict()
    for _ in range(count):
        name_len = read_u32()
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        shape = tuple(read_u32() for _ in range(read_u32()))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += size
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    params = ParamStore(np.float32)
    for name, value in arrays.items():
        prefix, _, key = name.partition("/")
        if prefix == "param":
            params.add(key, value)
    for name, value in arrays.items():
        prefix, _, key = name.partition("/")
        if prefix == "adam_m":
            params.adam_m[key][...] = value
        elif prefix == "adam_v":
            params.adam_v[key][...] = value
        elif prefix != "param":
            raise CheckpointError(f"{path}: unexpected array {name}")
    params.step = step
    return params


# ==========================================================
# FINITE DIFFERENCES
# ==========================================================
def numerical_gradient(params: ParamStore, loss_only: Callable[[ParamStore], float], step: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences over every parameter entry. Use a float64 store."""
    grads = {}
    for name, value in params.params.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss_only(params)
            flat[i] = original - step
            minus = loss_only(params)
            flat[i] = original
            gflat[i] = (plus - minus) / (2 * step)
        grads[name] = grad
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor), entrywise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
