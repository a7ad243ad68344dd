"""
Synth Module

Responsibilities:
- Heightfield scenes: urban (boxes on a plane) and rural (smooth fractal relief)
- Oracle renderer: first hit of a ray with the bilinear heightfield, found by
  quarter-cell marching and bisection; Lambertian shading, depth = ray parameter
  at the hit
- Dataset writer (images, cameras, ground-truth depths, manifest)
- Coarse-DEM priors rendered from a smoothed copy of the scene
- `make-scene` command
"""

import os
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from config import write_key_values
from geometry import Camera, SceneEnvelope, look_at, pixel_rays, save_camera, save_envelope
from utils import run_parallel, write_flt, write_png

logger = logging.getLogger(__name__)

# -----------------------------
# Scene defaults
# -----------------------------
SCENE_KINDS = ("urban", "rural")
DEFAULT_EXTENT = 512.0          # m, square footprint
DEFAULT_HEIGHT = 100.0          # m, envelope z-range
DEFAULT_ALTITUDE = 1500.0       # m
DEFAULT_SUN = (0.3, -0.4, 1.0)  # towards the sun, normalized on use
AMBIENT = 0.25

GROUND_LEVEL = 2.0
URBAN_BOXES = 14
URBAN_MIN_HEIGHT = 10.0
URBAN_MAX_HEIGHT = 40.0
RURAL_RELIEF = 45.0
RURAL_BASE = 5.0
RURAL_MAX_SLOPE = 0.6

# march step as a fraction of the GSD, then bisection down to this width
MARCH_FRACTION = 0.25
BISECTION_TOLERANCE = 1e-5

MISS_DEPTH = -1.0
TRAIN_ANGLES = {2: (-10.0, 10.0), 3: (-10.0, 10.0, 20.0)}
DEFAULT_TEST_ANGLE = 4.0


@dataclass
class Heightfield:
    """
    Elevation nodes z[i, j] at world (origin_x + j * gsd, origin_y + i * gsd),
    bilinear in between; texture is albedo per node.
    """
    z: np.ndarray
    gsd: float
    origin: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.texture = np.asarray(self.texture, dtype=np.float64)
        if self.z.ndim != 2 or min(self.z.shape) < 16:
            raise ValueError(f"heightfield grid must be at least 16x16, got {self.z.shape}")
        if self.texture.shape != self.z.shape + (3,):
            raise ValueError(f"texture {self.texture.shape} does not match grid {self.z.shape}")
        if not self.gsd > 0:
            raise ValueError(f"gsd must be > 0, got {self.gsd}")

    def _grid_coords(self, x, y):
        rows = np.clip((np.asarray(y) - self.origin[1]) / self.gsd, 0, self.z.shape[0] - 1)
        cols = np.clip((np.asarray(x) - self.origin[0]) / self.gsd, 0, self.z.shape[1] - 1)
        return rows, cols

    def height(self, x, y) -> np.ndarray:
        rows, cols = self._grid_coords(x, y)
        return ndimage.map_coordinates(self.z, [np.ravel(rows), np.ravel(cols)], order=1, mode="nearest").reshape(np.shape(rows))

    def albedo(self, x, y) -> np.ndarray:
        rows, cols = self._grid_coords(x, y)
        coords = [np.ravel(rows), np.ravel(cols)]
        return np.stack(
            [ndimage.map_coordinates(self.texture[:, :, c], coords, order=1, mode="nearest") for c in range(3)],
            axis=-1,
        ).reshape(np.shape(rows) + (3,))

    def gradient(self, x, y):
        """(dz/dx, dz/dy) of the bilinear patch containing (x, y)."""
        rows, cols = self._grid_coords(x, y)
        i0 = np.minimum(np.floor(rows).astype(int), self.z.shape[0] - 2)
        j0 = np.minimum(np.floor(cols).astype(int), self.z.shape[1] - 2)
        v = rows - i0
        u = cols - j0
        z00, z01 = self.z[i0, j0], self.z[i0, j0 + 1]
        z10, z11 = self.z[i0 + 1, j0], self.z[i0 + 1, j0 + 1]
        dzdx = ((1 - v) * (z01 - z00) + v * (z11 - z10)) / self.gsd
        dzdy = ((1 - u) * (z10 - z00) + u * (z11 - z01)) / self.gsd
        return dzdx, dzdy

    def smoothed(self, sigma: float) -> "Heightfield":
        return Heightfield(ndimage.gaussian_filter(self.z, sigma, mode="nearest"), self.gsd, self.origin, self.texture)


# ==========================================================
# SCENE GENERATION
# ==========================================================
def _noise(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (field - field.mean()) / (field.std() + 1e-12)


def _texture(rng, shape):
    """Multi-scale albedo so matching has structure at every pyramid level."""
    base = rng.uniform(0.3, 0.7, size=3)
    coarse = _noise(rng, shape, 6.0)
    fine = _noise(rng, shape, 1.2)
    tint = np.stack([_noise(rng, shape, 3.0) for _ in range(3)], axis=-1)
    tex = base + 0.12 * coarse[..., None] + 0.10 * fine[..., None] + 0.05 * tint
    return np.clip(tex, 0.05, 0.95)


def make_scene(kind: str, size: int = 256, seed: int = 0, extent: float = DEFAULT_EXTENT) -> Heightfield:
    """size cells per side over a square footprint of `extent` metres centered on the origin."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"kind must be one of {SCENE_KINDS}, got {kind!r}")
    if size < 15:
        raise ValueError(f"size must be >= 15, got {size}")
    rng = np.random.default_rng([seed, SCENE_KINDS.index(kind)])
    shape = (size + 1, size + 1)
    gsd = extent / size
    origin = np.array([-extent / 2, -extent / 2])
    texture = _texture(rng, shape)

    if kind == "urban":
        z = np.full(shape, GROUND_LEVEL)
        for _ in range(URBAN_BOXES):
            h = rng.uniform(URBAN_MIN_HEIGHT, URBAN_MAX_HEIGHT)
            bw, bh = rng.integers(max(size // 25, 2), max(size // 8, 3), size=2)
            i0 = rng.integers(1, size - bh)
            j0 = rng.integers(1, size - bw)
            z[i0:i0 + bh, j0:j0 + bw] = GROUND_LEVEL + h
            roof = rng.uniform(0.4, 1.1, size=3)
            texture[i0:i0 + bh, j0:j0 + bw] = np.clip(texture[i0:i0 + bh, j0:j0 + bw] * roof, 0.05, 0.95)
    else:
        relief = np.zeros(shape)
        for octave, amplitude in enumerate((1.0, 0.5, 0.25)):
            relief += amplitude * _noise(rng, shape, size / (8 * 2 ** octave))
        relief = (relief - relief.min()) / (relief.max() - relief.min())
        z = relief * RURAL_RELIEF
        gy, gx = np.gradient(z, gsd)
        slope = np.max(np.hypot(gx, gy))
        if slope > RURAL_MAX_SLOPE:
            z *= RURAL_MAX_SLOPE / slope
        z += RURAL_BASE

    logger.debug(f"{kind} scene: {shape[1]}x{shape[0]} nodes, heights {z.min():.1f}..{z.max():.1f} m")
    return Heightfield(z=z, gsd=gsd, origin=origin, texture=texture)


def default_envelope(extent: float = DEFAULT_EXTENT, height: float = DEFAULT_HEIGHT) -> SceneEnvelope:
    return SceneEnvelope([-extent / 2, -extent / 2, 0.0], [extent / 2, extent / 2, height])


# ==========================================================
# ORACLE RENDERING
# ==========================================================
def trace(scene: Heightfield, origins, directions, near, far, step: float = None) -> np.ndarray:
    """
    First parameter t in [near, far] where the ray meets the surface, found by
    marching then bisection. Rays starting below the surface hit at `near`;
    rays that never cross get MISS_DEPTH.
    """
    step = scene.gsd * MARCH_FRACTION if step is None else step
    count = len(origins)
    depth = np.full(count, MISS_DEPTH)
    if count == 0:
        return depth

    def above(t, idx):
        p = origins[idx] + t[:, None] * directions[idx]
        return p[:, 2] - scene.height(p[:, 0], p[:, 1])

    start = above(near, np.arange(count))
    buried = start <= 0
    depth[buried] = near[buried]
    pending = np.flatnonzero(~buried & (far > near))
    t_prev = near[pending].copy()
    lo = np.zeros(count)
    hi = np.zeros(count)
    crossed = np.zeros(count, dtype=bool)

    k = 1
    while pending.size:
        t_cur = np.minimum(near[pending] + k * step, far[pending])
        below = above(t_cur, pending) <= 0
        hit = pending[below]
        lo[hit] = t_prev[below]
        hi[hit] = t_cur[below]
        crossed[hit] = True
        done = below | (t_cur >= far[pending])
        pending = pending[~done]
        t_prev = t_cur[~done]
        k += 1

    idx = np.flatnonzero(crossed)
    a, b = lo[idx], hi[idx]
    while idx.size and np.max(b - a) > BISECTION_TOLERANCE:
        mid = 0.5 * (a + b)
        below = above(mid, idx) <= 0
        b = np.where(below, mid, b)
        a = np.where(below, a, mid)
    depth[idx] = 0.5 * (a + b)
    return depth


def shade(scene: Heightfield, points: np.ndarray, sun_dir) -> np.ndarray:
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    dzdx, dzdy = scene.gradient(points[:, 0], points[:, 1])
    normals = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    lambert = np.clip(normals @ sun, 0.0, None)
    return scene.albedo(points[:, 0], points[:, 1]) * (AMBIENT + (1 - AMBIENT) * lambert)[:, None]


def oracle_render(scene: Heightfield, camera: Camera, envelope: SceneEnvelope, sun_dir=DEFAULT_SUN, background=(0.0, 0.0, 0.0)):
    """
    Ground-truth (rgb (H, W, 3), depth (H, W)). Pixels whose ray misses the
    envelope or the terrain get the background color and MISS_DEPTH.
    """
    bundle, hit = pixel_rays(camera, camera.pixel_centers(), envelope)
    depth = np.full(len(bundle), MISS_DEPTH)
    idx = np.flatnonzero(hit)
    depth[idx] = trace(scene, bundle.origins[idx], bundle.directions[idx], bundle.near[idx], bundle.far[idx])

    rgb = np.tile(np.asarray(background, dtype=np.float64), (len(bundle), 1))
    seen = depth > 0
    if np.any(seen):
        points = bundle.origins[seen] + depth[seen, None] * bundle.directions[seen]
        rgb[seen] = shade(scene, points, sun_dir)
    shape = (camera.height, camera.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape)


# ==========================================================
# CAMERAS / DATASET
# ==========================================================
def make_camera(angle_deg: float, image_size: int, envelope: SceneEnvelope, altitude: float = DEFAULT_ALTITUDE) -> Camera:
    """Along-track view (north-south plane) at `angle_deg` off nadir, north up in the image."""
    lo, hi = envelope.bounds()
    target = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])])
    height_above = altitude - target[2]
    center = target + np.array([0.0, height_above * np.tan(np.radians(angle_deg)), height_above])
    rotation, translation = look_at(center, target, up=(0.0, 1.0, 0.0))
    extent = max(hi[0] - lo[0], hi[1] - lo[1])
    focal = 0.95 * image_size * np.linalg.norm(center - target) / extent
    return Camera(focal, image_size / 2, image_size / 2, image_size, image_size, rotation, translation)


def view_angles(n_views: int, test_angle: float = DEFAULT_TEST_ANGLE) -> dict:
    if n_views not in TRAIN_ANGLES:
        raise ValueError(f"n_views must be 2 or 3, got {n_views}")
    angles = {f"view{i}": a for i, a in enumerate(TRAIN_ANGLES[n_views])}
    if test_angle in angles.values():
        raise ValueError(f"test view at {test_angle} deg coincides with a train view")
    angles["test"] = test_angle
    return angles


def make_dataset(
    scene: Heightfield,
    n_views: int,
    out_dir,
    test_angle: float = DEFAULT_TEST_ANGLE,
    noise: float = 0.0,
    image_size: int = 256,
    seed: int = 0,
    envelope: SceneEnvelope = None,
    sun_dir=DEFAULT_SUN,
    kind: str = "custom",
):
    """
    Dataset directory:
      scene.flt / scene.txt        heights + albedo, grid metadata
      manifest.txt                 train/test split, envelope, sun
      {name}.png / .cam / _gtdepth.flt per view
    Noise is added to train images only, before 8-bit quantization.
    """
    envelope = envelope or default_envelope()
    angles = view_angles(n_views, test_angle)
    os.makedirs(out_dir, exist_ok=True)

    cameras = {name: make_camera(angle, image_size, envelope) for name, angle in angles.items()}
    renders = dict(zip(cameras, run_parallel(lambda name: oracle_render(scene, cameras[name], envelope, sun_dir), list(cameras))))

    for index, (name, camera) in enumerate(cameras.items()):
        rgb, depth = renders[name]
        if noise > 0 and name != "test":
            rng = np.random.default_rng([seed, 1, index])
            rgb = rgb + rng.normal(0.0, noise, size=rgb.shape)
        write_png(os.path.join(out_dir, f"{name}.png"), rgb)
        save_camera(os.path.join(out_dir, f"{name}.cam"), camera)
        write_flt(os.path.join(out_dir, f"{name}_gtdepth.flt"), depth)

    save_scene(out_dir, scene)
    manifest = {
        "kind": kind,
        "seed": int(seed),
        "train": ",".join(n for n in cameras if n != "test"),
        "test": "test",
        "image_size": int(image_size),
        "noise": float(noise),
    }
    manifest.update({f"angle_{name}": float(angle) for name, angle in angles.items()})
    save_envelope(manifest, envelope)
    sun = np.asarray(sun_dir, dtype=np.float64)
    manifest.update({f"sun_{axis}": float(v) for axis, v in zip("xyz", sun / np.linalg.norm(sun))})
    write_key_values(os.path.join(out_dir, "manifest.txt"), manifest, header="dataset manifest")
    logger.info(f"Dataset with {n_views} train views written to {out_dir} ✅")
    return cameras


def save_scene(out_dir, scene: Heightfield):
    write_flt(os.path.join(out_dir, "scene.flt"), np.concatenate([scene.z[:, :, None], scene.texture], axis=2))
    write_key_values(
        os.path.join(out_dir, "scene.txt"),
        {"gsd": float(scene.gsd), "origin_x": float(scene.origin[0]), "origin_y": float(scene.origin[1])},
    )


# ==========================================================
# COARSE DEM PRIOR
# ==========================================================
def coarse_dem_prior(scene: Heightfield, camera: Camera, envelope: SceneEnvelope, smoothing: float = 8.0, corr: float = 0.5):
    """Depth prior rendered from a Gaussian-smoothed heightfield, with one correlation everywhere."""
    from sgm import INVALID_DEPTH, PriorMaps

    if not 0.0 <= corr <= 1.0:
        raise ValueError(f"corr must be in [0, 1], got {corr}")
    _, depth = oracle_render(scene.smoothed(smoothing), camera, envelope)
    valid = depth > 0
    return PriorMaps(
        depth=np.where(valid, depth, INVALID_DEPTH),
        corr=np.where(valid, corr, 0.0),
        valid=valid,
    )


# ==========================================================
# COMMAND
# ==========================================================
def cmd_make_scene(args):
    scene = make_scene(args.kind, size=args.size, seed=args.seed)
    make_dataset(
        scene,
        n_views=args.views,
        out_dir=args.out,
        test_angle=args.test_angle,
        noise=args.noise,
        image_size=args.size,
        seed=args.seed,
        kind=args.kind,
    )
    return 0


def register_synth_commands(subparsers):
    parser = subparsers.add_parser("make-scene", help="synthetic heightfield + rendered views")
    parser.add_argument("--kind", choices=SCENE_KINDS, required=True)
    parser.add_argument("--size", type=int, default=256, help="image size in pixels (also heightfield cells per side)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--views", type=int, default=2, choices=(2, 3))
    parser.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise added to train images")
    parser.add_argument("--test-angle", type=float, default=DEFAULT_TEST_ANGLE)
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_make_scene)
