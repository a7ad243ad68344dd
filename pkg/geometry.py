"""
Geometry Module

Responsibilities:
- Pinhole cameras (world -> camera: x_c = R x_w + t, camera looks along +z)
- Pixel rays clipped to the scene envelope (t_n, t_f per ray)
- Projection of world points to pixels
- Camera files (key=value, one per view)

Pixel coordinates are continuous: pixel (i, j) covers [i, i+1) x [j, j+1),
so its center is (i + 0.5, j + 0.5).
"""

import logging
from dataclasses import dataclass

import numpy as np

from config import ConfigError, coerce, read_key_values, write_key_values

logger = logging.getLogger(__name__)

# Smallest admissible near bound when a camera sits inside the envelope
MIN_NEAR = 1e-6


class GeometryError(ValueError):
    pass


# -----------------------------
# Camera
# -----------------------------
@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if not self.focal > 0:
            raise GeometryError(f"focal must be > 0, got {self.focal}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9, rtol=0):
            raise GeometryError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "Camera":
        """Same camera for an image decimated by `factor` (size rounded up, matching edge padding)."""
        return Camera(
            focal=self.focal / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=-(-self.width // factor),
            height=-(-self.height // factor),
            rotation=self.rotation,
            translation=self.translation,
        )

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) continuous coordinates of every pixel center, row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> tuple:
    """
    Rotation and translation for a camera at `center` looking at `target`.
    World `up` maps to image -v (rows grow downwards).
    """
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise GeometryError("up vector parallel to the viewing direction")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ center


# -----------------------------
# Scene envelope
# -----------------------------
@dataclass(frozen=True)
class SceneEnvelope:
    box_min: np.ndarray
    box_max: np.ndarray
    margin: float = 0.0

    def __post_init__(self):
        box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        object.__setattr__(self, "box_min", box_min)
        object.__setattr__(self, "box_max", box_max)
        if not np.all(box_min < box_max):
            raise GeometryError(f"envelope min {box_min} not below max {box_max}")
        if self.margin < 0:
            raise GeometryError("vertical margin must be >= 0")

    def bounds(self) -> tuple:
        """Box extended vertically by the margin."""
        lift = np.array([0.0, 0.0, self.margin])
        return self.box_min - lift, self.box_max + lift

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map world points to [-1, 1]^3 over the (extended) box."""
        lo, hi = self.bounds()
        return 2.0 * (points - lo) / (hi - lo) - 1.0

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        lo, hi = self.bounds()
        return np.all((points >= lo - tol) & (points <= hi + tol), axis=-1)


# -----------------------------
# Rays
# -----------------------------
@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class RayBundle:
    """Many rays as arrays: origins/directions (R, 3), near/far (R,)."""
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def ray(self, index: int) -> Ray:
        return Ray(self.origins[index], self.directions[index], float(self.near[index]), float(self.far[index]))

    def subset(self, index) -> "RayBundle":
        return RayBundle(self.origins[index], self.directions[index], self.near[index], self.far[index])


def intersect_envelope(origins: np.ndarray, directions: np.ndarray, envelope: SceneEnvelope):
    """
    Slab test against the envelope box.
    Returns (near, far, hit); near is clamped to MIN_NEAR.
    """
    lo, hi = envelope.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_lo = np.minimum(t0, t1)
    t_hi = np.maximum(t0, t1)
    # Axis-parallel rays: inside the slab -> unconstrained, outside -> miss
    parallel = directions == 0.0
    inside = (origins >= lo) & (origins <= hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    near = np.max(t_lo, axis=-1)
    far = np.min(t_hi, axis=-1)
    hit = (far > near) & (far > MIN_NEAR)
    near = np.maximum(near, MIN_NEAR)
    return near, far, hit


def _pixel_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    local = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.focal,
            (pixels[:, 1] - camera.cy) / camera.focal,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    world = local @ camera.rotation
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def pixel_rays(camera: Camera, pixels: np.ndarray, envelope: SceneEnvelope):
    """
    Vectorized pixel_ray. Returns (RayBundle, hit mask); rays that miss the
    envelope keep near=far=MIN_NEAR and must be discarded by the caller.
    """
    directions = _pixel_directions(camera, pixels)
    origins = np.broadcast_to(camera.center, directions.shape).copy()
    near, far, hit = intersect_envelope(origins, directions, envelope)
    near = np.where(hit, near, MIN_NEAR)
    far = np.where(hit, far, MIN_NEAR)
    return RayBundle(origins, directions, near, far), hit


def pixel_ray(camera: Camera, px, envelope: SceneEnvelope) -> Ray:
    """Ray through the continuous pixel position px, bounded by the envelope."""
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    bundle, hit = pixel_rays(camera, np.array([[u, v]]), envelope)
    if not hit[0]:
        raise GeometryError(f"ray through pixel ({u}, {v}) misses the scene envelope")
    return bundle.ray(0)


def world_to_camera(camera: Camera, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ camera.rotation.T + camera.translation


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized projection. Returns (pixels (N, 2), in_front mask)."""
    local = np.atleast_2d(world_to_camera(camera, points))
    in_front = local[:, 2] > 0
    z = np.where(in_front, local[:, 2], 1.0)
    pixels = np.stack([camera.focal * local[:, 0] / z + camera.cx, camera.focal * local[:, 1] / z + camera.cy], axis=1)
    return pixels, in_front


def world_to_pixel(camera: Camera, x) -> np.ndarray:
    pixels, in_front = project_points(camera, np.asarray(x, dtype=np.float64).reshape(1, 3))
    if not in_front[0]:
        raise GeometryError(f"point {np.asarray(x).tolist()} is behind the camera")
    return pixels[0]


# -----------------------------
# Camera files
# -----------------------------
_ROTATION_KEYS = [f"r{i}{j}" for i in range(3) for j in range(3)]
_TRANSLATION_KEYS = ["t0", "t1", "t2"]


def save_camera(path, camera: Camera):
    values = {
        "focal": float(camera.focal),
        "cx": float(camera.cx),
        "cy": float(camera.cy),
        "width": int(camera.width),
        "height": int(camera.height),
    }
    values.update({key: float(v) for key, v in zip(_ROTATION_KEYS, camera.rotation.ravel())})
    values.update({key: float(v) for key, v in zip(_TRANSLATION_KEYS, camera.translation)})
    write_key_values(path, values)


def load_camera(path) -> Camera:
    values = read_key_values(path)
    expected = ["focal", "cx", "cy", "width", "height"] + _ROTATION_KEYS + _TRANSLATION_KEYS
    unknown = sorted(set(values) - set(expected))
    if unknown:
        raise ConfigError(unknown[0], f"unknown camera key in {path}")
    missing = [key for key in expected if key not in values]
    if missing:
        raise ConfigError(missing[0], f"missing from camera file {path}")
    return Camera(
        focal=coerce("focal", values["focal"], float),
        cx=coerce("cx", values["cx"], float),
        cy=coerce("cy", values["cy"], float),
        width=coerce("width", values["width"], int),
        height=coerce("height", values["height"], int),
        rotation=np.array([coerce(k, values[k], float) for k in _ROTATION_KEYS]).reshape(3, 3),
        translation=np.array([coerce(k, values[k], float) for k in _TRANSLATION_KEYS]),
    )


def save_envelope(values: dict, envelope: SceneEnvelope):
    """Add envelope entries to a key=value mapping."""
    for axis, lo, hi in zip("xyz", envelope.box_min, envelope.box_max):
        values[f"envelope_min_{axis}"] = float(lo)
        values[f"envelope_max_{axis}"] = float(hi)
    values["envelope_margin"] = float(envelope.margin)
    return values


def load_envelope(values: dict) -> SceneEnvelope:
    try:
        box_min = [coerce(f"envelope_min_{a}", values[f"envelope_min_{a}"], float) for a in "xyz"]
        box_max = [coerce(f"envelope_max_{a}", values[f"envelope_max_{a}"], float) for a in "xyz"]
    except KeyError as exc:
        raise ConfigError(exc.args[0], "missing envelope entry")
    margin = coerce("envelope_margin", values.get("envelope_margin", "0"), float)
    return SceneEnvelope(box_min, box_max, margin)
