"""
SGM Module

Responsibilities:
- Box-filter downsampling (priors are computed at 2^-2 scale by default)
- Rectification of a pinhole pair by rotating both views about their centers
- Zero-mean NCC cost volume (cost = 1 - NCC)
- Semi-global aggregation along 4 or 8 directions
- Winner-take-all + parabolic sub-pixel refinement, left-right check,
  mid-point triangulation back onto the reference rays
- `sgm` command: writes {ref}_prior_depth.flt, {ref}_prior_corr.flt,
  {ref}_prior_valid.flt
"""

import os
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from config import SPSNERF_THREADS
from geometry import Camera, SceneEnvelope, pixel_rays, project_points
from utils import pairwise_sum, run_parallel, to_gray, write_flt

logger = logging.getLogger(__name__)

# -----------------------------
# CONFIGURABLE PARAMETERS
# -----------------------------
DOWNSAMPLE_FACTORS = (1, 2, 4, 8)
VARIANCE_FLOOR = 1e-10      # windows flatter than this have NCC 0
INVALID_DEPTH = -1.0
SUBPIXEL_LIMIT = 0.5 - 1e-6

DIRECTIONS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))
DIRECTIONS_8 = DIRECTIONS_4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class SgmConfig:
    factor: int = 4
    window: int = 7
    p1: float = 0.03
    p2: float = 0.3
    directions: int = 8
    min_corr: float = 0.3
    lr_tolerance: float = 1.0
    disparity_margin: int = 2

    def __post_init__(self):
        if self.factor not in DOWNSAMPLE_FACTORS:
            raise ValueError(f"factor must be one of {DOWNSAMPLE_FACTORS}, got {self.factor}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if not (self.p2 >= self.p1 >= 0):
            raise ValueError(f"need P2 >= P1 >= 0, got P1={self.p1} P2={self.p2}")
        if self.directions not in (4, 8):
            raise ValueError(f"directions must be 4 or 8, got {self.directions}")


@dataclass
class CostVolume:
    cost: np.ndarray    # (H, W, D)
    d_min: int
    d_max: int
    valid: np.ndarray   # (H, W, D) entry computed from a full, textured window

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1)


@dataclass
class PriorMaps:
    depth: np.ndarray   # (H, W) metres along the reference ray, INVALID_DEPTH where invalid
    corr: np.ndarray    # (H, W) raw NCC in [-1, 1], 0 where invalid
    valid: np.ndarray   # (H, W) bool


# ==========================================================
# DOWNSAMPLING
# ==========================================================
def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filtered decimation; edges padded by replication up to a multiple of factor."""
    if factor not in DOWNSAMPLE_FACTORS:
        raise ValueError(f"factor must be one of {DOWNSAMPLE_FACTORS}, got {factor}")
    img = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return img.copy()
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    height, width = img.shape[:2]
    pad_h = (-height) % factor
    pad_w = (-width) % factor
    img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    h, w = img.shape[0] // factor, img.shape[1] // factor
    out = img.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))
    return out[:, :, 0] if squeeze else out


# ==========================================================
# RECTIFICATION
# ==========================================================
@dataclass(frozen=True)
class RectifiedView:
    """Pinhole view sharing its center with an original camera; principal point may leave the image."""
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    center: np.ndarray

    def directions(self, pixels: np.ndarray) -> np.ndarray:
        local = np.stack(
            [(pixels[:, 0] - self.cx) / self.focal, (pixels[:, 1] - self.cy) / self.focal, np.ones(len(pixels))],
            axis=1,
        )
        world = local @ self.rotation
        return world / np.linalg.norm(world, axis=1, keepdims=True)

    def project(self, points: np.ndarray):
        local = (np.atleast_2d(points) - self.center) @ self.rotation.T
        in_front = local[:, 2] > 0
        z = np.where(in_front, local[:, 2], 1.0)
        return np.stack([self.focal * local[:, 0] / z + self.cx, self.focal * local[:, 1] / z + self.cy], axis=1), in_front


def rectify_pair(ref: Camera, aux: Camera, envelope: SceneEnvelope):
    """
    Common rotation with x along the baseline (ref -> aux); both views keep
    the reference focal and size. The aux principal point is shifted so the
    envelope center has (near) zero disparity.
    """
    baseline = aux.center - ref.center
    length = np.linalg.norm(baseline)
    if length < 1e-9:
        raise ValueError("stereo pair shares its camera center")
    x_axis = baseline / length
    y_axis = np.cross(ref.rotation[2], x_axis)
    y_axis /= np.linalg.norm(y_axis)
    z_axis = np.cross(x_axis, y_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])

    # keep the reference image center at the rectified image center
    center_dir = ref.rotation.T @ np.array([(ref.width / 2 - ref.cx) / ref.focal, (ref.height / 2 - ref.cy) / ref.focal, 1.0])
    local = rotation @ center_dir
    cx = ref.width / 2 - ref.focal * local[0] / local[2]
    cy = ref.height / 2 - ref.focal * local[1] / local[2]
    left = RectifiedView(ref.focal, cx, cy, ref.width, ref.height, rotation, ref.center)

    scene_center = 0.5 * np.add(*envelope.bounds())
    offset = ref.focal * length / ((scene_center - ref.center) @ z_axis)
    right = RectifiedView(ref.focal, cx + round(offset), cy, ref.width, ref.height, rotation, aux.center)
    return left, right


def warp_to_view(img: np.ndarray, src: Camera, dst: RectifiedView):
    """Resample a gray image of `src` into `dst` (same center). Returns (image, inside mask)."""
    v, u = np.mgrid[0:dst.height, 0:dst.width]
    pixels = np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)
    src_px, in_front = project_points(src, dst.center + dst.directions(pixels))
    cols = src_px[:, 0] - 0.5
    rows = src_px[:, 1] - 0.5
    inside = in_front & (cols >= 0) & (cols <= src.width - 1) & (rows >= 0) & (rows <= src.height - 1)
    values = ndimage.map_coordinates(img, [rows, cols], order=1, mode="nearest")
    values = np.where(inside, values, 0.0)
    shape = (dst.height, dst.width)
    return values.reshape(shape), inside.reshape(shape)


def disparity_range(left: RectifiedView, right: RectifiedView, envelope: SceneEnvelope, margin: int = 2):
    lo, hi = envelope.bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    pl, _ = left.project(corners)
    pr, _ = right.project(corners)
    disparity = pl[:, 0] - pr[:, 0]
    return int(np.floor(disparity.min())) - margin, int(np.ceil(disparity.max())) + margin


# ==========================================================
# COST VOLUME
# ==========================================================
def _shift_right(img: np.ndarray, d: int) -> np.ndarray:
    """out[y, x] = img[y, x - d], zero outside."""
    out = np.zeros_like(img)
    width = img.shape[1]
    if d >= 0:
        out[:, d:] = img[:, :width - d] if d < width else 0
    else:
        d = max(d, -width)
        out[:, :width + d] = img[:, -d:]
    return out


def ncc_cost_volume(left: np.ndarray, right: np.ndarray, window: int, d_range, left_mask=None, right_mask=None):
    """
    Zero-mean NCC between left[y, x] and right[y, x - d] windows for every d
    in [d_min, d_max]. Returns (CostVolume, ncc (H, W, D)).
    Entries whose window leaves either image or lacks texture get NCC 0 and
    are flagged invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    d_min, d_max = int(d_range[0]), int(d_range[1])
    if d_max < d_min:
        raise ValueError(f"empty disparity range [{d_min}, {d_max}]")
    left = to_gray(left)
    right = to_gray(right)
    left_mask = np.ones(left.shape, dtype=bool) if left_mask is None else np.asarray(left_mask, dtype=bool)
    right_mask = np.ones(right.shape, dtype=bool) if right_mask is None else np.asarray(right_mask, dtype=bool)

    def box(a):
        return ndimage.uniform_filter(a, size=window, mode="nearest")

    mean_l = box(left)
    var_l = box(left * left) - mean_l ** 2
    full_l = ndimage.uniform_filter(left_mask.astype(np.float64), size=window, mode="constant", cval=0.0) > 1 - 1e-9

    depth = d_max - d_min + 1
    ncc = np.zeros(left.shape + (depth,))
    valid = np.zeros(left.shape + (depth,), dtype=bool)
    for k, d in enumerate(range(d_min, d_max + 1)):
        shifted = _shift_right(right, d)
        shifted_mask = _shift_right(right_mask.astype(np.float64), d)
        full = full_l & (ndimage.uniform_filter(shifted_mask, size=window, mode="constant", cval=0.0) > 1 - 1e-9)
        mean_r = box(shifted)
        var_r = box(shifted * shifted) - mean_r ** 2
        cov = box(left * shifted) - mean_l * mean_r
        textured = (var_l > VARIANCE_FLOOR) & (var_r > VARIANCE_FLOOR)
        denom = np.sqrt(np.where(textured, var_l * var_r, 1.0))
        score = np.where(textured, np.clip(cov / denom, -1.0, 1.0), 0.0)
        ncc[:, :, k] = np.where(full, score, 0.0)
        valid[:, :, k] = full & textured
    return CostVolume(cost=1.0 - ncc, d_min=d_min, d_max=d_max, valid=valid), ncc


def right_view_volume(cv: CostVolume) -> CostVolume:
    """Re-index a left-reference volume for the right image: C_r(y, x, d) = C_l(y, x + d, d)."""
    height, width, depth = cv.cost.shape
    cost = np.ones_like(cv.cost)
    valid = np.zeros_like(cv.valid)
    for k, d in enumerate(cv.disparities):
        d = int(d)
        if d >= 0:
            if d < width:
                cost[:, :width - d, k] = cv.cost[:, d:, k]
                valid[:, :width - d, k] = cv.valid[:, d:, k]
        else:
            cost[:, -d:, k] = cv.cost[:, :width + d, k]
            valid[:, -d:, k] = cv.valid[:, :width + d, k]
    return CostVolume(cost=cost, d_min=cv.d_min, d_max=cv.d_max, valid=valid)


# ==========================================================
# AGGREGATION
# ==========================================================
def _path_step(cost: np.ndarray, prev: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """L(p, d) = C(p, d) + min(L', L'(d+-1) + P1, min L' + P2) - min L'; rows of (K, D)."""
    prev_min = prev.min(axis=1, keepdims=True)
    shifted_down = np.full_like(prev, np.inf)
    shifted_down[:, 1:] = prev[:, :-1]
    shifted_up = np.full_like(prev, np.inf)
    shifted_up[:, :-1] = prev[:, 1:]
    best = np.minimum(np.minimum(prev, np.minimum(shifted_down, shifted_up) + p1), prev_min + p2)
    return cost + best - prev_min


def aggregate_direction(cost: np.ndarray, dy: int, dx: int, p1: float, p2: float) -> np.ndarray:
    """Path costs along (dy, dx); a path starts wherever the predecessor leaves the image."""
    height, width, _ = cost.shape
    out = np.empty_like(cost)
    if dx != 0:
        order = range(width) if dx > 0 else range(width - 1, -1, -1)
        for i, x in enumerate(order):
            column = cost[:, x]
            if i == 0:
                out[:, x] = column
                continue
            prev = out[:, x - dx]
            if dy == 0:
                out[:, x] = _path_step(column, prev, p1, p2)
            elif dy > 0:
                out[:dy, x] = column[:dy]
                out[dy:, x] = _path_step(column[dy:], prev[:-dy], p1, p2)
            else:
                out[height + dy:, x] = column[height + dy:]
                out[:height + dy, x] = _path_step(column[:height + dy], prev[-dy:], p1, p2)
    else:
        order = range(height) if dy > 0 else range(height - 1, -1, -1)
        for i, y in enumerate(order):
            row = cost[y]
            out[y] = row if i == 0 else _path_step(row, out[y - dy], p1, p2)
    return out


def aggregate(cv: CostVolume, p1: float, p2: float, directions: int = 8, threads: int = None) -> CostVolume:
    """Sum of path costs over 4 or 8 directions; directions run in parallel, summed in fixed order."""
    if not (p2 >= p1 >= 0):
        raise ValueError(f"need P2 >= P1 >= 0, got P1={p1} P2={p2}")
    if directions not in (4, 8):
        raise ValueError(f"directions must be 4 or 8, got {directions}")
    paths = DIRECTIONS_8 if directions == 8 else DIRECTIONS_4
    threads = SPSNERF_THREADS if threads is None else threads
    parts = run_parallel(lambda r: aggregate_direction(cv.cost, r[0], r[1], p1, p2), list(paths), threads)
    return CostVolume(cost=pairwise_sum(parts), d_min=cv.d_min, d_max=cv.d_max, valid=cv.valid)


# ==========================================================
# DISPARITY / PRIOR EXTRACTION
# ==========================================================
def winner_take_all(cv: CostVolume):
    """Returns (sub-pixel disparity (H, W), winning index (H, W), sub-pixel offset (H, W))."""
    cost = cv.cost
    index = np.argmin(cost, axis=2)
    depth = cost.shape[2]
    inner = (index > 0) & (index < depth - 1)
    lo = np.take_along_axis(cost, np.clip(index - 1, 0, depth - 1)[:, :, None], axis=2)[:, :, 0]
    mid = np.take_along_axis(cost, index[:, :, None], axis=2)[:, :, 0]
    hi = np.take_along_axis(cost, np.clip(index + 1, 0, depth - 1)[:, :, None], axis=2)[:, :, 0]
    curvature = lo - 2 * mid + hi
    usable = inner & (curvature > 0)
    offset = np.where(usable, (lo - hi) / (2 * np.where(usable, curvature, 1.0)), 0.0)
    offset = np.clip(offset, -SUBPIXEL_LIMIT, SUBPIXEL_LIMIT)
    return cv.d_min + index + offset, index, offset


def triangulate_midpoint(o1, d1, o2, d2) -> np.ndarray:
    """Mid-point of closest approach between rays o1 + s d1 and o2 + t d2 (unit directions)."""
    w0 = o1 - o2
    b = np.sum(d1 * d2, axis=-1)
    d = np.sum(d1 * w0, axis=-1)
    e = np.sum(d2 * w0, axis=-1)
    denom = 1.0 - b * b
    denom = np.where(np.abs(denom) < 1e-15, 1e-15, denom)
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    return 0.5 * ((o1 + s[..., None] * d1) + (o2 + t[..., None] * d2))


def rectified_disparity(cv_lr: CostVolume, cv_rl: CostVolume, ncc: np.ndarray, min_corr: float = 0.3, lr_tolerance: float = 1.0):
    """
    Left disparity, correlation at the winner and validity on the rectified grid.
    Invalid: left-right mismatch above tolerance, untextured or out-of-image
    winner, correlation below min_corr.
    """
    height, width = cv_lr.cost.shape[:2]
    disp_l, index_l, _ = winner_take_all(cv_lr)
    disp_r, _, _ = winner_take_all(cv_rl)

    cols = np.arange(width)[None, :].repeat(height, axis=0)
    rows = np.arange(height)[:, None].repeat(width, axis=1)
    match = np.rint(cols - disp_l).astype(int)
    in_range = (match >= 0) & (match < width)
    back = disp_r[rows, np.clip(match, 0, width - 1)]
    consistent = in_range & (np.abs(disp_l - back) <= lr_tolerance)

    winner_valid = np.take_along_axis(cv_lr.valid, index_l[:, :, None], axis=2)[:, :, 0]
    corr = np.take_along_axis(ncc, index_l[:, :, None], axis=2)[:, :, 0]
    return disp_l, corr, consistent & winner_valid & (corr >= min_corr)


def extract_prior(
    cv_lr: CostVolume,
    cv_rl: CostVolume,
    left: RectifiedView,
    right: RectifiedView,
    ncc: np.ndarray,
    ref_camera: Camera,
    envelope: SceneEnvelope,
    min_corr: float = 0.3,
    lr_tolerance: float = 1.0,
) -> PriorMaps:
    """
    Disparities -> metric depth along the rays of `ref_camera` (the low-res
    reference). Invalid: left-right mismatch above tolerance, untextured or
    out-of-image winner, correlation below min_corr, or no rectified pixel.
    """
    height, width = cv_lr.cost.shape[:2]
    disp_l, corr, valid_rect = rectified_disparity(cv_lr, cv_rl, ncc, min_corr, lr_tolerance)
    cols = np.arange(width)[None, :].repeat(height, axis=0)
    rows = np.arange(height)[:, None].repeat(width, axis=1)

    # 3-D points on the rectified grid
    pl = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1).astype(np.float64)
    pr = pl.copy()
    pr[:, 0] -= disp_l.ravel()
    points = triangulate_midpoint(
        np.broadcast_to(left.center, pl.shape[:1] + (3,)), left.directions(pl),
        np.broadcast_to(right.center, pr.shape[:1] + (3,)), right.directions(pr),
    ).reshape(height, width, 3)

    # pull onto the reference grid (nearest rectified pixel)
    bundle, hit = pixel_rays(ref_camera, ref_camera.pixel_centers(), envelope)
    rect_px, in_front = left.project(bundle.origins + bundle.directions)
    rc = np.floor(rect_px[:, 0]).astype(int)
    rr = np.floor(rect_px[:, 1]).astype(int)
    inside = in_front & (rc >= 0) & (rc < width) & (rr >= 0) & (rr < height)
    rc = np.clip(rc, 0, width - 1)
    rr = np.clip(rr, 0, height - 1)

    ok = hit & inside & valid_rect[rr, rc]
    depth = np.sum((points[rr, rc] - bundle.origins) * bundle.directions, axis=1)
    ok &= depth > 0
    shape = (ref_camera.height, ref_camera.width)
    logger.debug(f"Prior: {int(ok.sum())} of {ok.size} reference pixels valid ({int(hit.sum())} hit the envelope)")
    return PriorMaps(
        depth=np.where(ok, depth, INVALID_DEPTH).reshape(shape),
        corr=np.where(ok, corr[rr, rc], 0.0).reshape(shape),
        valid=ok.reshape(shape),
    )


@dataclass
class StereoMatch:
    """Intermediate products of one stereo run, kept for inspection and tests."""
    left: RectifiedView
    right: RectifiedView
    left_image: np.ndarray
    right_image: np.ndarray
    raw: CostVolume
    aggregated: CostVolume
    ncc: np.ndarray
    prior: PriorMaps


def match_pair(ref_img, aux_img, ref_cam: Camera, aux_cam: Camera, envelope: SceneEnvelope, cfg: SgmConfig = SgmConfig()) -> StereoMatch:
    """Full pre-processing for one reference view: downsample, rectify, match, triangulate."""
    ref_low = ref_cam.scaled(cfg.factor)
    aux_low = aux_cam.scaled(cfg.factor)
    ref_gray = to_gray(downsample(ref_img, cfg.factor))
    aux_gray = to_gray(downsample(aux_img, cfg.factor))

    left, right = rectify_pair(ref_low, aux_low, envelope)
    left_img, left_mask = warp_to_view(ref_gray, ref_low, left)
    right_img, right_mask = warp_to_view(aux_gray, aux_low, right)
    d_range = disparity_range(left, right, envelope, cfg.disparity_margin)
    logger.info(f"Matching {ref_low.width}x{ref_low.height} pair over disparities {d_range}")

    raw, ncc = ncc_cost_volume(left_img, right_img, cfg.window, d_range, left_mask, right_mask)
    cv_lr = aggregate(raw, cfg.p1, cfg.p2, cfg.directions)
    cv_rl = aggregate(right_view_volume(raw), cfg.p1, cfg.p2, cfg.directions)
    prior = extract_prior(cv_lr, cv_rl, left, right, ncc, ref_low, envelope, cfg.min_corr, cfg.lr_tolerance)
    return StereoMatch(left, right, left_img, right_img, raw, cv_lr, ncc, prior)


def write_prior(out_dir, ref_name: str, prior: PriorMaps):
    os.makedirs(out_dir, exist_ok=True)
    write_flt(os.path.join(out_dir, f"{ref_name}_prior_depth.flt"), prior.depth)
    write_flt(os.path.join(out_dir, f"{ref_name}_prior_corr.flt"), prior.corr)
    write_flt(os.path.join(out_dir, f"{ref_name}_prior_valid.flt"), prior.valid.astype(np.float32))


# ==========================================================
# COMMAND
# ==========================================================
def cmd_sgm(args):
    from dataset import load_dataset
    from synth import coarse_dem_prior

    dataset = load_dataset(args.dataset)
    ref = dataset.view(args.ref_view)
    cfg = SgmConfig(factor=args.factor, window=args.window, p1=args.p1, p2=args.p2,
                    directions=args.directions, min_corr=args.min_corr)
    if args.coarse_dem:
        prior = coarse_dem_prior(dataset.load_scene(), ref.camera.scaled(cfg.factor), dataset.envelope,
                                 smoothing=args.dem_smoothing, corr=args.dem_corr)
        logger.info(f"Coarse DEM prior for {ref.name} ✅")
    else:
        if not args.aux_view:
            raise ValueError("--aux-view is required unless --coarse-dem is given")
        aux = dataset.view(args.aux_view)
        prior = match_pair(ref.image, aux.image, ref.camera, aux.camera, dataset.envelope, cfg).prior
        logger.info(f"SGM prior for {ref.name} against {aux.name}: {prior.valid.mean():.1%} valid ✅")
    write_prior(args.out, ref.name, prior)
    return 0


def register_sgm_commands(subparsers):
    parser = subparsers.add_parser("sgm", help="low-resolution depth + correlation prior for one view")
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--ref-view", required=True)
    parser.add_argument("--aux-view")
    parser.add_argument("--factor", type=int, default=4, choices=DOWNSAMPLE_FACTORS)
    parser.add_argument("--window", type=int, default=7)
    parser.add_argument("--p1", type=float, default=0.03)
    parser.add_argument("--p2", type=float, default=0.3)
    parser.add_argument("--directions", type=int, default=8, choices=(4, 8))
    parser.add_argument("--min-corr", type=float, default=0.3)
    parser.add_argument("--coarse-dem", action="store_true", help="prior from a smoothed heightfield instead of matching")
    parser.add_argument("--dem-smoothing", type=float, default=8.0, help="Gaussian sigma in heightfield cells")
    parser.add_argument("--dem-corr", type=float, default=0.5, help="constant correlation of the coarse DEM prior")
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_sgm)
