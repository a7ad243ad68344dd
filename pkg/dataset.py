"""
Dataset Module

Responsibilities:
- Load a dataset directory written by `make-scene` (manifest, views, scene)
- Load per-view SGM priors and upsample them to image resolution
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from config import ConfigError, coerce, read_key_values
from geometry import SceneEnvelope, load_camera, load_envelope
from supervision import DepthPrior
from utils import read_flt, read_flt_band, read_png

logger = logging.getLogger(__name__)

PRIOR_SUFFIXES = ("prior_depth", "prior_corr", "prior_valid")


class DatasetError(ValueError):
    pass


@dataclass
class View:
    name: str
    camera: object
    image: np.ndarray                 # (H, W, 3) float in [0, 1]
    gt_depth: Optional[np.ndarray]    # (H, W), -1 where the ray misses


@dataclass
class Dataset:
    root: str
    envelope: SceneEnvelope
    train: List[str]
    test: str
    views: Dict[str, View] = field(default_factory=dict)
    manifest: Dict[str, str] = field(default_factory=dict)

    def view(self, name: str) -> View:
        if name not in self.views:
            raise DatasetError(f"unknown view {name!r}; dataset has {sorted(self.views)}")
        return self.views[name]

    def train_views(self) -> List[View]:
        return [self.views[name] for name in self.train]

    def load_scene(self):
        return load_scene(self.root)


def _path(root, name):
    return os.path.join(root, name)


def load_dataset(root) -> Dataset:
    manifest_path = _path(root, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise DatasetError(f"{root}: no manifest.txt")
    try:
        manifest = read_key_values(manifest_path)
        envelope = load_envelope(manifest)
    except ConfigError as exc:
        raise DatasetError(f"{manifest_path}: {exc}")

    train = [name.strip() for name in manifest.get("train", "").split(",") if name.strip()]
    test = manifest.get("test", "").strip()
    if not train:
        raise DatasetError(f"{manifest_path}: no train views")

    dataset = Dataset(root=str(root), envelope=envelope, train=train, test=test, manifest=manifest)
    for name in train + ([test] if test else []):
        image_path = _path(root, f"{name}.png")
        camera_path = _path(root, f"{name}.cam")
        if not (os.path.isfile(image_path) and os.path.isfile(camera_path)):
            raise DatasetError(f"{root}: view {name!r} is missing its image or camera file")
        camera = load_camera(camera_path)
        image = read_png(image_path)
        if image.shape[:2] != (camera.height, camera.width):
            raise DatasetError(f"view {name!r}: image {image.shape[:2]} does not match camera {camera.height}x{camera.width}")
        depth_path = _path(root, f"{name}_gtdepth.flt")
        gt_depth = read_flt_band(depth_path) if os.path.isfile(depth_path) else None
        dataset.views[name] = View(name=name, camera=camera, image=image, gt_depth=gt_depth)

    logger.info(f"Loaded dataset {root}: train={train} test={test or '-'}")
    return dataset


def load_scene(root):
    from synth import Heightfield

    values = read_key_values(_path(root, "scene.txt"))
    raster = read_flt(_path(root, "scene.flt"))
    if raster.shape[2] != 4:
        raise DatasetError(f"{root}/scene.flt: expected 4 channels (height + rgb), found {raster.shape[2]}")
    return Heightfield(
        z=raster[:, :, 0].astype(np.float64),
        gsd=coerce("gsd", values["gsd"], float),
        origin=(coerce("origin_x", values["origin_x"], float), coerce("origin_y", values["origin_y"], float)),
        texture=raster[:, :, 1:].astype(np.float64),
    )


# -----------------------------
# Priors
# -----------------------------
def upsample_nearest(raster: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel (u, v) takes low-res cell (min(v // f, h - 1), min(u // f, w - 1)), f = ceil(size / low size)."""
    low_h, low_w = raster.shape[:2]
    fy = -(-height // low_h)
    fx = -(-width // low_w)
    rows = np.minimum(np.arange(height) // fy, low_h - 1)
    cols = np.minimum(np.arange(width) // fx, low_w - 1)
    return raster[rows[:, None], cols[None, :]]


def load_view_prior(prior_dir, name: str, height: int, width: int) -> DepthPrior:
    """Read {name}_prior_*.flt and bring them to (height, width). Correlation stays raw here."""
    rasters = {}
    for suffix in PRIOR_SUFFIXES:
        path = _path(prior_dir, f"{name}_{suffix}.flt")
        if not os.path.isfile(path):
            raise DatasetError(f"missing prior raster {path}")
        rasters[suffix] = read_flt_band(path).astype(np.float64)
    shapes = {r.shape for r in rasters.values()}
    if len(shapes) != 1:
        raise DatasetError(f"prior rasters for {name!r} disagree in shape: {sorted(shapes)}")
    low_h, low_w = shapes.pop()
    if low_h > height or low_w > width:
        raise DatasetError(f"prior for {name!r} ({low_h}x{low_w}) is larger than the image ({height}x{width})")
    valid = upsample_nearest(rasters["prior_valid"], height, width) > 0.5
    return DepthPrior(
        depth=upsample_nearest(rasters["prior_depth"], height, width),
        corr=upsample_nearest(rasters["prior_corr"], height, width),
        valid=valid,
    )


def load_priors(prior_dir, dataset: Dataset) -> Dict[str, DepthPrior]:
    priors = {}
    for view in dataset.train_views():
        priors[view.name] = load_view_prior(prior_dir, view.name, view.camera.height, view.camera.width)
        logger.debug(f"Prior for {view.name}: {priors[view.name].valid.mean():.1%} valid")
    return priors
