"""Stereo pre-processing: cost volume, aggregation, disparity and prior extraction."""

import numpy as np
import pytest
from scipy import ndimage

from sgm import (
    SUBPIXEL_LIMIT,
    CostVolume,
    SgmConfig,
    aggregate,
    aggregate_direction,
    downsample,
    match_pair,
    ncc_cost_volume,
    rectified_disparity,
    rectify_pair,
    right_view_volume,
    triangulate_midpoint,
    winner_take_all,
)
from dataset import load_dataset
from geometry import pixel_rays, project_points
from synth import Heightfield, default_envelope, make_camera, make_dataset, make_scene, oracle_render, trace


# ── Helpers ──────────────────────────────────────────────────────────────

def _texture(rng, shape=(40, 60)):
    return ndimage.gaussian_filter(rng.uniform(size=shape), 1.0)


def _shifted_pair(rng, d0=3, shape=(40, 60)):
    """right[y, x] = left[y, x + d0], so left[y, x] matches right[y, x - d0]."""
    left = _texture(rng, shape)
    return left, np.roll(left, -d0, axis=1)


def _disparities(left, right, d_range=(0, 6), p1=0.03, p2=0.3, directions=8):
    raw, ncc = ncc_cost_volume(left, right, 7, d_range)
    lr = aggregate(raw, p1, p2, directions, threads=0)
    rl = aggregate(right_view_volume(raw), p1, p2, directions, threads=0)
    return raw, lr, rl, ncc


def _row_dp(cost, p1, p2):
    """Left-to-right path costs for one row, one disparity at a time."""
    width, depth = cost.shape
    out = np.zeros_like(cost)
    out[0] = cost[0]
    for x in range(1, width):
        prev = out[x - 1]
        m = prev.min()
        for d in range(depth):
            options = [prev[d], m + p2]
            if d > 0:
                options.append(prev[d - 1] + p1)
            if d < depth - 1:
                options.append(prev[d + 1] + p1)
            out[x, d] = cost[x, d] + min(options) - m
    return out


def _plane_scene():
    """Flat textured ground at 50 m."""
    texture = make_scene("rural", size=128, seed=2).texture
    return Heightfield(z=np.full(texture.shape[:2], 50.0), gsd=4.0, origin=np.array([-256.0, -256.0]), texture=texture)


# ── Downsampling ─────────────────────────────────────────────────────────

class TestDownsample:

    def test_identity(self, rng):
        img = rng.uniform(size=(9, 7))
        np.testing.assert_array_equal(downsample(img, 1), img)

    def test_constant(self):
        np.testing.assert_allclose(downsample(np.full((16, 12, 3), 0.3), 4), np.full((4, 3, 3), 0.3))

    def test_checkerboard(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        np.testing.assert_allclose(downsample(board, 2), np.full((2, 2), 0.5))

    def test_edge_padding(self):
        assert downsample(np.ones((5, 9)), 4).shape == (2, 3)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            downsample(np.ones((8, 8)), 3)


# ── Cost volume ──────────────────────────────────────────────────────────

class TestNcc:

    def test_matches_double_loop(self, rng):
        left = rng.uniform(size=(20, 24))
        right = rng.uniform(size=(20, 24))
        cv, ncc = ncc_cost_volume(left, right, 5, (-2, 3))
        for y in (4, 9, 15):
            for x in (7, 12, 18):
                for k, d in enumerate(range(-2, 4)):
                    a = left[y - 2:y + 3, x - 2:x + 3]
                    b = right[y - 2:y + 3, x - d - 2:x - d + 3]
                    a, b = a - a.mean(), b - b.mean()
                    expected = np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b))
                    assert ncc[y, x, k] == pytest.approx(expected, abs=1e-6)
                    assert cv.valid[y, x, k]
        np.testing.assert_allclose(cv.cost, 1.0 - ncc)

    def test_constant_images(self):
        cv, ncc = ncc_cost_volume(np.full((16, 16), 0.4), np.full((16, 16), 0.4), 5, (0, 3))
        assert np.all(ncc == 0.0)
        assert not cv.valid.any()

    def test_windows_leaving_image_are_invalid(self, rng):
        left, right = _shifted_pair(rng)
        cv, ncc = ncc_cost_volume(left, right, 7, (0, 6))
        # columns whose match window starts left of the right image
        assert not cv.valid[:, :3 + 6, -1].any()
        assert not cv.valid[:3].any() and not cv.valid[-3:].any()
        assert np.all(ncc[~cv.valid] == 0.0)

    def test_minimum_at_shift(self, rng):
        left, right = _shifted_pair(rng, d0=3)
        cv, _ = ncc_cost_volume(left, right, 7, (0, 6))
        interior = cv.cost[5:-5, 10:-10]
        assert np.all(np.argmin(interior, axis=2) == 3)

    def test_range_wider_than_image(self, rng):
        left, right = rng.uniform(size=(12, 10)), rng.uniform(size=(12, 10))
        cv, ncc = ncc_cost_volume(left, right, 3, (-14, 14))
        assert cv.cost.shape == (12, 10, 29)
        assert not cv.valid[:, :, :4].any() and not cv.valid[:, :, -4:].any()
        assert np.all(ncc[~cv.valid] == 0.0)

    def test_empty_range(self, rng):
        with pytest.raises(ValueError):
            ncc_cost_volume(np.ones((8, 8)), np.ones((8, 8)), 3, (4, 2))


# ── Aggregation ──────────────────────────────────────────────────────────

class TestAggregate:

    def test_zero_penalties_multiply_cost(self, rng):
        cv = CostVolume(cost=rng.uniform(0, 2, size=(6, 8, 5)), d_min=0, d_max=4, valid=np.ones((6, 8, 5), dtype=bool))
        np.testing.assert_allclose(aggregate(cv, 0.0, 0.0, 8, threads=0).cost, 8 * cv.cost, rtol=1e-12)
        np.testing.assert_allclose(aggregate(cv, 0.0, 0.0, 4, threads=0).cost, 4 * cv.cost, rtol=1e-12)

    def test_single_row_matches_dp(self, rng):
        cost = rng.uniform(0, 2, size=(1, 30, 7))
        forward = aggregate_direction(cost, 0, 1, 0.05, 0.4)
        backward = aggregate_direction(cost, 0, -1, 0.05, 0.4)
        expected_fwd = _row_dp(cost[0], 0.05, 0.4)
        expected_bwd = _row_dp(cost[0, ::-1], 0.05, 0.4)[::-1]
        np.testing.assert_allclose(forward[0], expected_fwd, rtol=1e-12)
        np.testing.assert_allclose(backward[0], expected_bwd, rtol=1e-12)

    def test_diagonal_path_starts_at_border(self, rng):
        cost = rng.uniform(0, 2, size=(5, 6, 3))
        out = aggregate_direction(cost, 1, 1, 0.1, 0.5)
        np.testing.assert_array_equal(out[0], cost[0])
        np.testing.assert_array_equal(out[:, 0], cost[:, 0])

    def test_thread_count_does_not_change_bits(self, rng):
        cv = CostVolume(cost=rng.uniform(0, 2, size=(10, 12, 5)), d_min=0, d_max=4, valid=np.ones((10, 12, 5), dtype=bool))
        assert np.array_equal(aggregate(cv, 0.03, 0.3, 8, threads=0).cost, aggregate(cv, 0.03, 0.3, 8, threads=4).cost)

    def test_penalty_order(self, rng):
        cv = CostVolume(cost=np.ones((4, 4, 3)), d_min=0, d_max=2, valid=np.ones((4, 4, 3), dtype=bool))
        with pytest.raises(ValueError):
            aggregate(cv, 0.3, 0.03)
        with pytest.raises(ValueError):
            SgmConfig(p1=0.3, p2=0.03)

    def test_fronto_parallel_constant_disparity(self, rng):
        left, right = _shifted_pair(rng, d0=3)
        _, lr, _, _ = _disparities(left, right)
        disp, index, _ = winner_take_all(lr)
        assert np.all(index[5:-5, 10:-10] == 3)
        assert np.all(np.abs(disp[5:-5, 10:-10] - 3.0) < 0.5)

    def test_aggregation_does_not_hurt_noisy_plane(self, rng):
        left, right = _shifted_pair(rng, d0=3)
        noise = np.random.default_rng(9)
        left = left + noise.normal(0, 0.02, left.shape)
        right = right + noise.normal(0, 0.02, right.shape)
        raw, lr, _, _ = _disparities(left, right)
        before = np.mean(winner_take_all(raw)[1][5:-5, 10:-10] != 3)
        after = np.mean(winner_take_all(lr)[1][5:-5, 10:-10] != 3)
        assert after <= before


# ── Disparity / prior ────────────────────────────────────────────────────

class TestDisparity:

    def test_subpixel_offset_bounded(self, rng):
        cv = CostVolume(cost=rng.uniform(size=(12, 12, 9)), d_min=-4, d_max=4, valid=np.ones((12, 12, 9), dtype=bool))
        disp, index, offset = winner_take_all(cv)
        assert np.all(np.abs(offset) <= SUBPIXEL_LIMIT)
        np.testing.assert_allclose(disp, -4 + index + offset)

    def test_correlation_bounded(self, rng):
        left, right = _shifted_pair(rng)
        _, lr, rl, ncc = _disparities(left, right)
        _, corr, _ = rectified_disparity(lr, rl, ncc)
        assert np.all((corr >= -1.0) & (corr <= 1.0))

    def test_occluded_strip_invalid(self, rng):
        left, right = _shifted_pair(rng, d0=3)
        right[:, 25:35] = _texture(np.random.default_rng(77), (40, 10))
        _, lr, rl, ncc = _disparities(left, right)
        _, _, valid = rectified_disparity(lr, rl, ncc)
        # left columns 28..37 see the replaced strip; keep the window clear of its edges
        strip = valid[5:-5, 31:35]
        assert np.mean(~strip) >= 0.8
        assert np.mean(valid[5:-5, 10:20]) >= 0.9

    def test_midpoint_of_intersecting_rays(self):
        target = np.array([3.0, -2.0, 5.0])
        o1, o2 = np.array([0.0, 0.0, 0.0]), np.array([10.0, 0.0, 0.0])
        d1 = target - o1
        d2 = target - o2
        point = triangulate_midpoint(o1, d1 / np.linalg.norm(d1), o2, d2 / np.linalg.norm(d2))
        np.testing.assert_allclose(point, target, atol=1e-10)

    def test_midpoint_of_skew_rays(self):
        point = triangulate_midpoint(np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                                     np.array([0.0, 0.0, 2.0]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(point, [0.0, 0.0, 1.0], atol=1e-12)


class TestRectification:

    def test_rows_align(self, rng):
        env = default_envelope()
        ref, aux = make_camera(-10.0, 64, env), make_camera(10.0, 64, env)
        left, right = rectify_pair(ref, aux, env)
        points = rng.uniform([-200, -200, 0], [200, 200, 100], size=(50, 3))
        pl, front_l = left.project(points)
        pr, front_r = right.project(points)
        assert np.all(front_l) and np.all(front_r)
        np.testing.assert_allclose(pl[:, 1], pr[:, 1], atol=1e-6)

    def test_same_center_rejected(self):
        env = default_envelope()
        cam = make_camera(0.0, 32, env)
        with pytest.raises(ValueError):
            rectify_pair(cam, cam, env)


class TestMatchPair:

    def test_plane_depth_within_one_disparity(self):
        env = default_envelope()
        scene = _plane_scene()
        ref, aux = make_camera(-10.0, 128, env), make_camera(10.0, 128, env)
        ref_img, _ = oracle_render(scene, ref, env)
        aux_img, _ = oracle_render(scene, aux, env)
        result = match_pair(ref_img, aux_img, ref, aux, env, SgmConfig(factor=2))
        prior = result.prior

        low = ref.scaled(2)
        _, gt = oracle_render(scene, low, env)
        baseline = np.linalg.norm(aux.center - ref.center)
        one_pixel = gt ** 2 / (low.focal * baseline)

        interior = np.zeros_like(prior.valid)
        interior[6:-6, 6:-6] = True
        checked = prior.valid & interior & (gt > 0)
        assert checked.sum() >= 0.5 * interior.sum()
        assert np.mean(np.abs(prior.depth - gt)[checked] <= one_pixel[checked]) >= 0.95
        assert np.all(prior.depth[~prior.valid] == -1.0)
        assert np.all(prior.corr[~prior.valid] == 0.0)


# ── Plane plus boxes ─────────────────────────────────────────────────────

def _one_disparity_depth(ref_low, aux_low, depth):
    baseline = np.linalg.norm(aux_low.center - ref_low.center)
    return depth ** 2 / (ref_low.focal * baseline)


def _hidden_from(scene, ref_low, aux_low, envelope):
    """
    Oracle visibility on the reference grid: (gt depth, occlusion depth gap).
    The gap is how far in front of the reference surface point the aux ray
    meets the terrain; zero where the point is visible from the aux camera.
    Pixels without a surface hit or outside the aux image get gap -1.
    """
    _, gt = oracle_render(scene, ref_low, envelope)
    bundle, _ = pixel_rays(ref_low, ref_low.pixel_centers(), envelope)
    depth = gt.reshape(-1)
    seen = depth > 0
    points = bundle.origins + np.where(seen, depth, 0.0)[:, None] * bundle.directions

    pixels, in_front = project_points(aux_low, points)
    in_aux = in_front & np.all((pixels >= 0) & (pixels < [aux_low.width, aux_low.height]), axis=1)
    offset = points - aux_low.center
    dist = np.linalg.norm(offset, axis=1)
    origins = np.repeat(aux_low.center[None], len(points), axis=0)
    first = trace(scene, origins, offset / dist[:, None], np.maximum(dist - 200.0, 0.0), dist + 1.0)
    gap = np.where(seen & in_aux & (first > 0), np.maximum(dist - first, 0.0), -1.0)
    return gt, gap.reshape(gt.shape)


@pytest.fixture(scope="module")
def boxes_match(tmp_path_factory):
    root = tmp_path_factory.mktemp("boxes")
    scene = make_scene("urban", size=64, seed=2)
    make_dataset(scene, 3, root, image_size=256, kind="urban")
    dataset = load_dataset(root)
    ref, aux = dataset.view("view0"), dataset.view("view2")
    result = match_pair(ref.image, aux.image, ref.camera, aux.camera, dataset.envelope, SgmConfig(factor=4))
    ref_low, aux_low = ref.camera.scaled(4), aux.camera.scaled(4)
    gt, gap = _hidden_from(scene, ref_low, aux_low, dataset.envelope)
    interior = np.zeros(gt.shape, dtype=bool)
    interior[6:-6, 6:-6] = True
    return result.prior, gt, gap, _one_disparity_depth(ref_low, aux_low, np.maximum(gt, 0.0)), interior


class TestPlanePlusBoxes:

    def test_prior_grid(self, boxes_match):
        prior, gt, _, _, _ = boxes_match
        assert prior.depth.shape == gt.shape == (64, 64)

    def test_valid_pixels_within_one_disparity(self, boxes_match):
        prior, gt, _, one_pixel, interior = boxes_match
        checked = prior.valid & interior & (gt > 0)
        assert checked.sum() >= 0.5 * interior.sum()
        assert np.mean(np.abs(prior.depth - gt)[checked] <= one_pixel[checked]) >= 0.95

    def test_occlusions_flagged_invalid(self, boxes_match):
        prior, _, gap, one_pixel, interior = boxes_match
        # only occlusions deeper than one disparity count
        occluded = interior & (gap > one_pixel)
        assert occluded.sum() >= 5
        recall = np.mean(~prior.valid[occluded])
        assert recall >= 0.9, f"{recall:.2%} of {occluded.sum()} occluded pixels flagged"
