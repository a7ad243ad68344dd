"""Cameras, envelope-bounded rays, projection and camera files."""

import numpy as np
import pytest

from config import ConfigError
from geometry import (
    MIN_NEAR,
    Camera,
    GeometryError,
    SceneEnvelope,
    load_camera,
    look_at,
    pixel_ray,
    pixel_rays,
    project_points,
    save_camera,
    world_to_pixel,
)

from conftest import nadir_camera


# ── Helpers ──────────────────────────────────────────────────────────────

def _oblique_camera(angle_deg=30.0, size=32):
    distance = 1500.0
    center = (0.0, -distance * np.sin(np.radians(angle_deg)), 50.0 + distance * np.cos(np.radians(angle_deg)))
    rotation, translation = look_at(center, (0.0, 0.0, 50.0))
    return Camera(800.0, size / 2, size / 2, size, size, rotation, translation)


def _march_bounds(origin, direction, envelope, step=1e-3, t_max=2500.0):
    """Brute-force entry/exit parameters by sampling the ray."""
    t = np.arange(0.0, t_max, step)
    inside = envelope.contains(origin + t[:, None] * direction, tol=0.0)
    idx = np.flatnonzero(inside)
    return t[idx[0]], t[idx[-1]]


# ── Camera ───────────────────────────────────────────────────────────────

class TestCamera:

    def test_center_from_pose(self, camera):
        np.testing.assert_allclose(camera.center, [0.0, 0.0, 1500.0], atol=1e-9)

    def test_look_at_is_rotation(self):
        rotation, _ = look_at((10.0, -300.0, 1400.0), (0.0, 0.0, 20.0))
        np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_rejects_bad_focal(self):
        with pytest.raises(GeometryError):
            Camera(0.0, 16, 16, 32, 32, np.eye(3), np.zeros(3))

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(GeometryError):
            Camera(100.0, 16, 16, 32, 32, np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_rejects_principal_point_outside(self):
        with pytest.raises(GeometryError):
            Camera(100.0, 40, 16, 32, 32, np.eye(3), np.zeros(3))

    def test_scaled_rounds_size_up(self, camera):
        small = Camera(100.0, 15, 15, 30, 30, camera.rotation, camera.translation).scaled(4)
        assert (small.width, small.height) == (8, 8)
        assert small.focal == pytest.approx(25.0)


# ── Rays ─────────────────────────────────────────────────────────────────

class TestPixelRay:

    def test_nadir_center_pixel(self, camera, envelope):
        ray = pixel_ray(camera, (16.0, 16.0), envelope)
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, -1.0], atol=1e-12)
        assert ray.near == pytest.approx(1400.0)
        assert ray.far == pytest.approx(1500.0)

    def test_oblique_corner_matches_marching(self, envelope):
        cam = _oblique_camera(30.0)
        ray = pixel_ray(cam, (0.5, 0.5), envelope)
        near, far = _march_bounds(ray.origin, ray.direction, envelope)
        assert ray.near == pytest.approx(near, abs=2e-3)
        assert ray.far == pytest.approx(far, abs=2e-3)

    def test_unit_directions(self, camera, envelope):
        bundle, hit = pixel_rays(camera, camera.pixel_centers(), envelope)
        np.testing.assert_allclose(np.linalg.norm(bundle.directions, axis=1), 1.0, atol=1e-12)
        assert np.all(bundle.near[hit] < bundle.far[hit])

    def test_outside_image(self, camera, envelope):
        with pytest.raises(GeometryError):
            pixel_ray(camera, (-1.0, 3.0), envelope)

    def test_miss(self, envelope):
        # looking at the sky
        rotation, translation = look_at((0.0, 0.0, 1500.0), (0.0, 0.0, 3000.0), up=(0.0, 1.0, 0.0))
        cam = Camera(100.0, 16, 16, 32, 32, rotation, translation)
        with pytest.raises(GeometryError):
            pixel_ray(cam, (16.0, 16.0), envelope)

    def test_camera_inside_envelope_clamps_near(self):
        env = SceneEnvelope([-50.0, -50.0, 0.0], [50.0, 50.0, 2000.0])
        ray = pixel_ray(nadir_camera(), (16.0, 16.0), env)
        assert ray.near == MIN_NEAR
        assert ray.far == pytest.approx(1500.0)

    def test_margin_extends_vertically(self, camera):
        env = SceneEnvelope([-50.0, -50.0, 0.0], [50.0, 50.0, 100.0], margin=10.0)
        ray = pixel_ray(camera, (16.0, 16.0), env)
        assert ray.near == pytest.approx(1390.0)
        assert ray.far == pytest.approx(1510.0)


# ── Projection ───────────────────────────────────────────────────────────

class TestProjection:

    def test_matches_homogeneous_matrix(self, rng):
        cam = _oblique_camera(20.0)
        points = rng.uniform([-50, -50, 0], [50, 50, 100], size=(20, 3))
        pixels, in_front = project_points(cam, points)
        P = cam.intrinsics @ np.hstack([cam.rotation, cam.translation[:, None]])
        homog = (P @ np.hstack([points, np.ones((20, 1))]).T).T
        np.testing.assert_allclose(pixels, homog[:, :2] / homog[:, 2:], rtol=1e-12)
        assert np.all(in_front)

    def test_ray_point_projects_back(self, envelope):
        cam = _oblique_camera(25.0)
        ray = pixel_ray(cam, (7.25, 20.5), envelope)
        np.testing.assert_allclose(world_to_pixel(cam, ray.at(0.5 * (ray.near + ray.far))), [7.25, 20.5], atol=1e-9)

    def test_behind_camera(self, camera):
        with pytest.raises(GeometryError):
            world_to_pixel(camera, [0.0, 0.0, 2000.0])


# ── Camera files ─────────────────────────────────────────────────────────

class TestCameraFiles:

    def test_round_trip_exact(self, tmp_path):
        cam = _oblique_camera(17.0)
        save_camera(tmp_path / "a.cam", cam)
        back = load_camera(tmp_path / "a.cam")
        assert back.focal == cam.focal and back.cx == cam.cx and back.width == cam.width
        assert np.array_equal(back.rotation, cam.rotation)
        assert np.array_equal(back.translation, cam.translation)

    def test_unknown_key(self, tmp_path, camera):
        path = tmp_path / "a.cam"
        save_camera(path, camera)
        with open(path, "a") as fh:
            fh.write("skew=0\n")
        with pytest.raises(ConfigError) as err:
            load_camera(path)
        assert err.value.key == "skew"

    def test_missing_key(self, tmp_path):
        path = tmp_path / "a.cam"
        path.write_text("focal=100\n")
        with pytest.raises(ConfigError):
            load_camera(path)
