"""
Metrics / DSM Module

Responsibilities:
- PSNR (capped), SSIM (Gaussian window), MAE split by a validity mask
- DSM extraction from a trained field with nadir rays
- Ground-truth DSM from a synthetic heightfield
- Transfer of matcher validity from image space onto DSM cells
- `dsm` and `eval` commands
"""

import os
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy import ndimage

from config import coerce, read_key_values, write_key_values
from geometry import RayBundle, SceneEnvelope, intersect_envelope, project_points
from utils import read_flt_band, read_image, to_gray, write_flt, write_png

logger = logging.getLogger(__name__)

# -----------------------------
# Metric constants
# -----------------------------
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# nadir rays start this far above the envelope top
DSM_RAY_LIFT = 1.0


@dataclass
class Dsm:
    elevation: np.ndarray   # (H, W) metres, row 0 = north edge
    gsd: float
    origin: np.ndarray      # world (x, y) of the top-left corner of pixel (0, 0)

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        if not self.gsd > 0:
            raise ValueError(f"gsd must be > 0, got {self.gsd}")

    def cell_centers(self):
        """World (x, y) of every cell center, each (H, W)."""
        rows, cols = np.mgrid[0:self.elevation.shape[0], 0:self.elevation.shape[1]]
        return self.origin[0] + (cols + 0.5) * self.gsd, self.origin[1] - (rows + 0.5) * self.gsd

    def aligned_with(self, other: "Dsm") -> bool:
        return (
            self.elevation.shape == other.elevation.shape
            and np.isclose(self.gsd, other.gsd)
            and np.allclose(self.origin, other.origin)
        )


# ==========================================================
# IMAGE METRICS
# ==========================================================
def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean SSIM of the gray images over windows fully inside the image."""
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    radius = window // 2
    truncate = radius / sigma

    def blur(x):
        return ndimage.gaussian_filter(x, sigma, truncate=truncate, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = k1 ** 2, k2 ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    crop = ssim_map[radius:a.shape[0] - radius, radius:a.shape[1] - radius]
    return float(crop.mean())


def mae_split(dsm: Dsm, gt: Dsm, valid_mask: np.ndarray):
    """(mae_in, mae_out); a partition with no cells reports None."""
    if not dsm.aligned_with(gt):
        raise ValueError("DSM and ground truth are not aligned (shape, gsd or origin differ)")
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != dsm.elevation.shape:
        raise ValueError(f"mask {valid_mask.shape} does not match DSM {dsm.elevation.shape}")
    error = np.abs(dsm.elevation - gt.elevation)
    mae_in = float(error[valid_mask].mean()) if valid_mask.any() else None
    mae_out = float(error[~valid_mask].mean()) if (~valid_mask).any() else None
    if mae_in is None or mae_out is None:
        logger.warning(f"Empty validity partition: mae_in={mae_in} mae_out={mae_out}")
    return mae_in, mae_out


# ==========================================================
# DSM
# ==========================================================
def dsm_grid(envelope: SceneEnvelope, gsd: float):
    """(height, width, origin) of a north-up grid covering the envelope footprint."""
    if not gsd > 0:
        raise ValueError(f"gsd must be > 0, got {gsd}")
    lo, hi = envelope.bounds()
    width = int(round((hi[0] - lo[0]) / gsd))
    height = int(round((hi[1] - lo[1]) / gsd))
    return height, width, np.array([lo[0], hi[1]])


def nadir_rays(envelope: SceneEnvelope, gsd: float):
    height, width, origin = dsm_grid(envelope, gsd)
    template = Dsm(np.zeros((height, width)), gsd, origin)
    xs, ys = template.cell_centers()
    lo, hi = envelope.bounds()
    top = hi[2] + DSM_RAY_LIFT
    origins = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, top)], axis=1)
    directions = np.tile([0.0, 0.0, -1.0], (xs.size, 1))
    near, far, _ = intersect_envelope(origins, directions, envelope)
    return RayBundle(origins, directions, near, far), template


def extract_dsm(params, cfg, envelope: SceneEnvelope, gsd: float, seed: int = None, threads: int = None) -> Dsm:
    """Elevation = ray origin z - D for one nadir ray per cell, rendered with the test-time sampler."""
    from trainer import render_bundle

    rays, template = nadir_rays(envelope, gsd)
    _, depth, _ = render_bundle(params, cfg, envelope, rays, seed=seed, threads=threads)
    lo, hi = envelope.bounds()
    elevation = np.clip(rays.origins[:, 2] - depth, lo[2], hi[2])
    logger.info(f"DSM {template.elevation.shape[1]}x{template.elevation.shape[0]} at {gsd} m extracted")
    return Dsm(elevation.reshape(template.elevation.shape), gsd, template.origin)


def ground_truth_dsm(scene, envelope: SceneEnvelope, gsd: float) -> Dsm:
    height, width, origin = dsm_grid(envelope, gsd)
    template = Dsm(np.zeros((height, width)), gsd, origin)
    xs, ys = template.cell_centers()
    return Dsm(scene.height(xs, ys), gsd, origin)


def project_validity(gt: Dsm, views, priors, tolerance: float = None) -> np.ndarray:
    """
    A DSM cell is valid when its ground-truth surface point is visible in at
    least one train view (ground-truth depth agrees within `tolerance`) and
    that view's prior is valid at the pixel it projects to.
    """
    tolerance = max(2.0 * gt.gsd, 1.0) if tolerance is None else tolerance
    xs, ys = gt.cell_centers()
    points = np.stack([xs.ravel(), ys.ravel(), gt.elevation.ravel()], axis=1)
    valid = np.zeros(len(points), dtype=bool)
    for view in views:
        prior = priors.get(view.name) if priors else None
        if prior is None:
            continue
        camera = view.camera
        pixels, in_front = project_points(camera, points)
        cols = np.floor(pixels[:, 0]).astype(int)
        rows = np.floor(pixels[:, 1]).astype(int)
        inside = in_front & (cols >= 0) & (cols < camera.width) & (rows >= 0) & (rows < camera.height)
        cols = np.clip(cols, 0, camera.width - 1)
        rows = np.clip(rows, 0, camera.height - 1)
        seen = inside & np.asarray(prior.valid, dtype=bool)[rows, cols]
        if view.gt_depth is not None:
            distance = np.linalg.norm(points - camera.center, axis=1)
            seen &= np.abs(view.gt_depth[rows, cols] - distance) <= tolerance
        valid |= seen
    return valid.reshape(gt.elevation.shape)


def write_dsm(path, dsm: Dsm):
    """FLT raster plus a sidecar .txt with gsd and origin."""
    write_flt(path, dsm.elevation)
    write_key_values(
        os.path.splitext(path)[0] + ".txt",
        {"gsd": float(dsm.gsd), "origin_x": float(dsm.origin[0]), "origin_y": float(dsm.origin[1])},
    )


def read_dsm(path) -> Dsm:
    sidecar = os.path.splitext(path)[0] + ".txt"
    values = read_key_values(sidecar)
    return Dsm(
        read_flt_band(path),
        coerce("gsd", values["gsd"], float),
        (coerce("origin_x", values["origin_x"], float), coerce("origin_y", values["origin_y"], float)),
    )


# ==========================================================
# RUN EVALUATION
# ==========================================================
def evaluate_run(params, cfg, dataset, priors, gsd: float = 2.0, out_dir=None) -> Dict[str, Optional[float]]:
    """Test-view PSNR/SSIM and DSM MAE_in/MAE_out for one trained field."""
    from trainer import render_view

    test = dataset.view(dataset.test)
    rgb, depth = render_view(params, cfg, test.camera, dataset.envelope)
    dsm = extract_dsm(params, cfg, dataset.envelope, gsd)
    gt = ground_truth_dsm(dataset.load_scene(), dataset.envelope, gsd)
    valid = project_validity(gt, dataset.train_views(), priors)
    mae_in, mae_out = mae_split(dsm, gt, valid)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_png(os.path.join(out_dir, f"{test.name}_render.png"), rgb)
        write_flt(os.path.join(out_dir, f"{test.name}_render_depth.flt"), depth)
        write_dsm(os.path.join(out_dir, "dsm.flt"), dsm)
    return {"psnr": psnr(rgb, test.image), "ssim": ssim(rgb, test.image), "mae_in": mae_in, "mae_out": mae_out}


# ==========================================================
# COMMANDS
# ==========================================================
def cmd_dsm(args):
    from dataset import load_dataset

    if args.scene:
        dataset = load_dataset(args.scene)
        dsm = ground_truth_dsm(dataset.load_scene(), dataset.envelope, args.gsd)
    else:
        from trainer import load_run

        params, cfg, extra = load_run(args.checkpoint)
        dataset = load_dataset(args.dataset or extra.get("dataset"))
        dsm = extract_dsm(params, cfg, dataset.envelope, args.gsd, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_dsm(args.out, dsm)
    logger.info(f"DSM written to {args.out} ✅")
    return 0


def evaluate_files(pred_path, gt_path, mask_path=None) -> Dict[str, Optional[float]]:
    """Images (PNG or multi-band FLT) get PSNR/SSIM; single-band FLT rasters are DSMs and get MAE."""
    pred = read_image(pred_path)
    gt = read_image(gt_path)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    report = {}
    if pred.ndim == 3 and pred.shape[2] == 1:
        mask = np.ones(pred.shape[:2], dtype=bool)
        if mask_path:
            mask = read_flt_band(mask_path) > 0.5
        zero = np.zeros(2)
        mae_in, mae_out = mae_split(Dsm(pred[:, :, 0], 1.0, zero), Dsm(gt[:, :, 0], 1.0, zero), mask)
        report["mae_in"] = mae_in
        report["mae_out"] = mae_out
    else:
        report["psnr"] = psnr(pred, gt)
        report["ssim"] = ssim(pred, gt)
    return report


def cmd_eval(args):
    report = evaluate_files(args.pred, args.gt, args.valid_mask)
    print(pd.Series(report, dtype=object).to_string())
    if args.report:
        write_key_values(args.report, {k: ("absent" if v is None else float(v)) for k, v in report.items()})
    return 0


def register_metrics_commands(subparsers):
    parser = subparsers.add_parser("dsm", help="extract a DSM from a checkpoint (or the scene ground truth)")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--scene", help="dataset directory: write the ground-truth DSM instead")
    parser.add_argument("--dataset", help="defaults to the dataset recorded in run.txt")
    parser.add_argument("--gsd", type=float, default=2.0)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_dsm)

    parser = subparsers.add_parser("eval", help="PSNR/SSIM for images, MAE_in/MAE_out for DSMs")
    parser.add_argument("--pred", required=True)
    parser.add_argument("--gt", required=True)
    parser.add_argument("--valid-mask")
    parser.add_argument("--report")
    parser.set_defaults(handler=cmd_eval)
