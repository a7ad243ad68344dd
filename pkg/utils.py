import struct
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence

import numpy as np
from PIL import Image

from config import SPSNERF_THREADS

logger = logging.getLogger(__name__)

FLT_MAGIC = b"FLT1"
_FLT_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


# ==========================================================
# FLT RASTERS
# ==========================================================
def write_flt(path, raster: np.ndarray):
    """
    Write a float raster as FLT1:
    magic, u32 width, height, channels, then float32 LE payload,
    row-major, channel-interleaved.
    2-D arrays are written with one channel.
    """
    data = np.asarray(raster)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise RasterFormatError(f"expected HxW or HxWxC raster, got shape {data.shape}")
    data = data.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise RasterFormatError(f"refusing to write non-finite values to {path}")
    height, width, channels = data.shape
    with open(path, "wb") as fh:
        fh.write(_FLT_HEADER.pack(FLT_MAGIC, width, height, channels))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_flt(path) -> np.ndarray:
    """Read a FLT1 raster as float32 (H, W, C)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FLT_HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, width, height, channels = _FLT_HEADER.unpack_from(blob)
    if magic != FLT_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    expected = width * height * channels * 4
    payload = blob[_FLT_HEADER.size:]
    if len(payload) != expected:
        raise RasterFormatError(f"{path}: payload is {len(payload)} bytes, header says {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(height, width, channels).astype(np.float32)


def read_flt_band(path) -> np.ndarray:
    """Read a single-channel FLT raster as (H, W)."""
    raster = read_flt(path)
    if raster.shape[2] != 1:
        raise RasterFormatError(f"{path}: expected 1 channel, found {raster.shape[2]}")
    return raster[:, :, 0]


# ==========================================================
# PNG IMAGES
# ==========================================================
def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray):
    """Write an (H, W, 3) float image in [0,1] as 8-bit RGB."""
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float32 RGB in [0,1]."""
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float32)
    return pixels / 255.0


def read_image(path) -> np.ndarray:
    """PNG or FLT, by extension."""
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_flt(path)


# ==========================================================
# RASTER HELPERS
# ==========================================================
def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) for RGB rasters; single-band rasters pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image[:, :, 0] * 0.299 + image[:, :, 1] * 0.587 + image[:, :, 2] * 0.114


# ==========================================================
# WORKERS
# ==========================================================
def run_parallel(func: Callable, items: Sequence, threads: int = None) -> List:
    """
    Map func over items, preserving order.
    threads=0 runs inline (deterministic single-threaded mode).
    """
    threads = SPSNERF_THREADS if threads is None else threads
    if threads <= 0 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def pairwise_sum(values: Sequence):
    """Sum in a fixed pairwise-tree order so the result does not depend on scheduling."""
    values = list(values)
    if not values:
        raise ValueError("pairwise_sum of an empty sequence")
    while len(values) > 1:
        paired = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            paired.append(values[-1])
        values = paired
    return values[0]
