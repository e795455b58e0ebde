import math
import time

import numpy as np
import pytest

from uavnav.camera import (
    CameraIntrinsics,
    CameraPose,
    DepthImage,
    pixel_directions,
    render_depth,
    render_hit_ids,
)
from uavnav.collision_aware import (
    DIST_EPSILON,
    CollisionAwareConfig,
    collision_aware,
    contour_mask,
    distance_correct,
    extract_contours,
    fuse,
    render_edge_inflation,
)
from uavnav.geometry import (
    Cylinder,
    Vec3,
    World,
    WorldConfig,
    generate_world,
    inflate_world,
)

INTR = CameraIntrinsics()
CFG = CollisionAwareConfig(d_uav=0.3, contour_grad_threshold=0.3, intr=INTR)


def flat_image(value, intr=INTR):
    return DepthImage(
        intr.width, intr.height, np.full((intr.height, intr.width), value), intr.max_range
    )


def single_cylinder_scene(dist, lat, radius, d_uav=0.3):
    wcfg = WorldConfig(
        bounds_min=Vec3(-2.0, -5.0, 0.0),
        bounds_max=Vec3(6.0, 5.0, 3.0),
        poisson_radius=100.0,
        seed=1,
    )
    empty = generate_world(wcfg)
    world = World(
        obstacles=(Cylinder(2.0 + dist, lat, radius, 3.0),),
        config=wcfg,
        start=empty.start,
        goal=empty.goal,
    )
    pose = CameraPose(Vec3(2.0, 0.0, 1.5), yaw=0.0)
    return world, pose


def dilate_chebyshev(mask, r):
    out = mask.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        out = grown
    return out


class TestContours:
    def test_constant_image_has_no_contours(self):
        assert extract_contours(flat_image(5.0), CFG) == []

    def test_threshold_above_scene_span_gives_none(self):
        world, pose = single_cylinder_scene(3.0, 0.0, 0.3)
        raw = render_depth(world, pose, INTR)
        big = CollisionAwareConfig(
            d_uav=0.3, contour_grad_threshold=100.0, intr=INTR
        )
        assert extract_contours(raw, big) == []

    def test_contours_match_silhouette_mask_oracle(self):
        # Oracle: a second render that tags which primitive each pixel hit.
        # Contours must be cylinder pixels 4-adjacent to a non-cylinder pixel
        # whose depth sits more than the threshold behind.
        world, pose = single_cylinder_scene(3.0, 0.2, 0.35)
        raw, ids = render_hit_ids(world, pose, INTR)
        cyl = ids == 0
        expected = np.zeros_like(cyl)
        d = raw.data
        t = CFG.contour_grad_threshold
        expected[:, :-1] |= cyl[:, :-1] & (d[:, 1:] - d[:, :-1] > t)
        expected[:, 1:] |= cyl[:, 1:] & (d[:, :-1] - d[:, 1:] > t)
        expected[:-1, :] |= cyl[:-1, :] & (d[1:, :] - d[:-1, :] > t)
        expected[1:, :] |= cyl[1:, :] & (d[:-1, :] - d[1:, :] > t)
        got = contour_mask(raw, CFG)
        assert np.array_equal(got, expected)
        assert got.sum() > 0
        # Nearer-side rule: every contour pixel belongs to the cylinder here.
        assert np.all(cyl[got])

    def test_max_range_pixels_never_contours(self):
        img = flat_image(INTR.max_range)
        img.data[:, :10] = 1.0
        mask = contour_mask(img, CFG)
        assert not mask[:, 10:].any()
        assert mask[:, 9].all()


class TestEdgeInflation:
    def test_empty_contours_give_max_range(self):
        out = render_edge_inflation(np.empty((0, 3)), CFG)
        assert np.all(out.data == INTR.max_range)

    def test_on_axis_point_reads_near_sphere_depth(self):
        cfg = CollisionAwareConfig(d_uav=0.4, intr=INTR)
        out = render_edge_inflation(np.array([[0.0, 0.0, 3.0]]), cfg)
        assert out.data[INTR.height // 2, INTR.width // 2] == pytest.approx(
            2.8, abs=1e-12
        )

    def test_splat_matches_per_pixel_brute_force(self):
        # Brute-force oracle: independently solve the ray/sphere quadratic at
        # every pixel with plain numpy and compare the full image.
        rng = np.random.default_rng(3)
        pts = np.column_stack(
            [
                rng.uniform(-1.0, 1.0, 8),
                rng.uniform(-0.7, 0.7, 8),
                rng.uniform(1.0, 6.0, 8),
            ]
        )
        cfg = CollisionAwareConfig(d_uav=0.5, intr=INTR)
        s = cfg.inflation_radius
        out = render_edge_inflation(pts, cfg)
        dirs = pixel_directions(INTR)
        expected = np.full((INTR.height, INTR.width), INTR.max_range)
        for v in range(INTR.height):
            for u in range(INTR.width):
                d = dirs[v, u]
                dd = d @ d
                for p in pts:
                    b = d @ p
                    disc = b * b - dd * (p @ p - s * s)
                    if disc < 0:
                        continue
                    t_near = (b - math.sqrt(disc)) / dd
                    t_far = (b + math.sqrt(disc)) / dd
                    if t_far <= 0:
                        continue
                    expected[v, u] = min(
                        expected[v, u], max(t_near, DIST_EPSILON)
                    )
        assert np.abs(out.data - expected).max() < 1e-12

    def test_footprint_diameter_matches_angular_size(self):
        depth = 4.0
        cfg = CollisionAwareConfig(d_uav=0.6, intr=INTR)
        out = render_edge_inflation(np.array([[0.0, 0.0, depth]]), cfg)
        row = out.data[INTR.height // 2]
        touched = np.nonzero(row < INTR.max_range)[0]
        pixel_angle = 1.0 / INTR.focal
        expected = 2.0 * math.atan(cfg.inflation_radius / depth) / pixel_angle
        assert abs(len(touched) - expected) <= 2.0

    def test_rejects_nonpositive_z(self):
        with pytest.raises(ValueError):
            render_edge_inflation(np.array([[0.0, 0.0, -1.0]]), CFG)


class TestDistanceCorrect:
    def test_plain_arithmetic(self):
        out = distance_correct(flat_image(2.0), CFG)
        assert np.all(out.data == 1.85)

    def test_clamps_at_epsilon(self):
        out = distance_correct(flat_image(0.10), CFG)
        assert np.all(out.data == DIST_EPSILON)

    def test_zero_size_limit_is_identity(self):
        tiny = CollisionAwareConfig(d_uav=1e-300, intr=INTR)
        img = flat_image(3.3)
        out = distance_correct(img, tiny)
        assert np.allclose(out.data, img.data, atol=1e-12)

    def test_max_range_pixels_also_shift(self):
        out = distance_correct(flat_image(INTR.max_range), CFG)
        assert np.all(out.data == INTR.max_range - 0.15)


class TestFuse:
    def test_idempotent_and_commutative(self):
        a = flat_image(2.0)
        b = flat_image(3.0)
        a.data[0, 0] = 5.0
        assert np.array_equal(fuse(a, a).data, a.data)
        assert np.array_equal(fuse(a, b).data, fuse(b, a).data)
        assert fuse(a, b).data[0, 0] == 3.0

    def test_min_example(self):
        a = flat_image(2.8)
        b = flat_image(2.85)
        assert np.all(fuse(a, b).data == 2.8)

    def test_dimension_mismatch_raises(self):
        small = CameraIntrinsics(width=32, height=24)
        with pytest.raises(ValueError, match="64x48"):
            fuse(flat_image(1.0), flat_image(1.0, small))


class TestCollisionAware:
    def test_obstacle_free_equals_distance_correct(self):
        wcfg = WorldConfig(
            bounds_min=Vec3(-2, -5, 0),
            bounds_max=Vec3(6, 5, 3),
            poisson_radius=100.0,
            seed=1,
        )
        world = generate_world(wcfg)
        pose = CameraPose(Vec3(2.0, 0.0, 1.5), yaw=0.0)
        raw = render_depth(world, pose, INTR)
        ca = collision_aware(raw, CFG)
        corr = distance_correct(raw, CFG)
        assert np.array_equal(ca.data, corr.data)

    def test_ordering_invariant(self):
        world, pose = single_cylinder_scene(3.0, 0.1, 0.3)
        raw = render_depth(world, pose, INTR)
        ca = collision_aware(raw, CFG)
        corr = distance_correct(raw, CFG)
        assert np.all(ca.data <= corr.data + 1e-15)
        assert np.all(corr.data <= raw.data + 1e-15)

    def test_deterministic(self):
        world, pose = single_cylinder_scene(2.8, -0.2, 0.25)
        raw = render_depth(world, pose, INTR)
        assert np.array_equal(
            collision_aware(raw, CFG).data, collision_aware(raw, CFG).data
        )

    def test_formula_exactness(self):
        # The corrected image and the fusion must satisfy their defining
        # per-pixel formulas bit-exactly.
        world, pose = single_cylinder_scene(3.2, 0.0, 0.3)
        raw = render_depth(world, pose, INTR)
        corr = distance_correct(raw, CFG)
        assert np.array_equal(
            corr.data, np.maximum(raw.data - CFG.d_uav / 2.0, DIST_EPSILON)
        )
        pts = pixel_directions(INTR)[contour_mask(raw, CFG)] * raw.data[
            contour_mask(raw, CFG)
        ][:, None]
        infl = render_edge_inflation(pts, CFG)
        ca = collision_aware(raw, CFG)
        assert np.array_equal(ca.data, np.minimum(infl.data, corr.data))

    def test_center_pixel_against_inflated_oracle(self):
        cfg = CollisionAwareConfig(d_uav=0.2, intr=INTR)
        world, pose = single_cylinder_scene(3.0, 0.0, 0.3, d_uav=0.2)
        raw = render_depth(world, pose, INTR)
        ca = collision_aware(raw, cfg)
        oracle = render_depth(inflate_world(world, cfg.inflation_radius), pose, INTR)
        cu, cv = INTR.width // 2, INTR.height // 2
        assert abs(ca.data[cv, cu] - oracle.data[cv, cu]) < 0.05

    def test_oracle_agreement_50_scenes(self):
        # Inflated-world render oracle over the center 50% crop, excluding a
        # 2 px Chebyshev band around contours: MAE <= 0.05 m and never
        # optimistic by more than 0.02 m; the 50 scenes render in < 10 s.
        cfg = CollisionAwareConfig(d_uav=0.2, contour_grad_threshold=0.3, intr=INTR)
        s = cfg.inflation_radius
        rng = np.random.default_rng(7)
        t0 = time.time()
        maes = []
        worst = -np.inf
        for _ in range(50):
            world, pose = single_cylinder_scene(
                rng.uniform(2.5, 3.5), rng.uniform(-0.3, 0.3), rng.uniform(0.1, 0.4)
            )
            raw = render_depth(world, pose, INTR)
            ca = collision_aware(raw, cfg)
            oracle = render_depth(inflate_world(world, s), pose, INTR)
            band = dilate_chebyshev(contour_mask(raw, cfg), 2)
            h, w = raw.data.shape
            crop = np.zeros((h, w), bool)
            crop[h // 4 : h - h // 4, w // 4 : w - w // 4] = True
            sel = crop & ~band
            diff = ca.data[sel] - oracle.data[sel]
            maes.append(np.abs(diff).mean())
            worst = max(worst, diff.max())
        elapsed = time.time() - t0
        assert max(maes) <= 0.05, max(maes)
        assert worst <= 0.02, worst
        assert elapsed < 10.0, elapsed

    def test_us_cylinder_grows_in_ca_image(self):
        # A thin obstacle occupying at least one raw pixel must occupy
        # strictly more pixels after preprocessing.  Occupancy oracle:
        # comparison against the same scene without the cylinder.
        world, pose = single_cylinder_scene(1.5, 0.0, 0.005)
        empty = World(
            obstacles=(), config=world.config, start=world.start, goal=world.goal
        )
        raw = render_depth(world, pose, INTR)
        raw_empty = render_depth(empty, pose, INTR)
        occupied_raw = raw.data < raw_empty.data - 1e-9
        assert occupied_raw.sum() >= 1
        ca = collision_aware(raw, CFG)
        ca_empty = collision_aware(raw_empty, CFG)
        occupied_ca = ca.data < ca_empty.data - 1e-9
        assert occupied_ca.sum() > occupied_raw.sum()


def test_config_validation():
    with pytest.raises(ValueError):
        CollisionAwareConfig(d_uav=0.0)
    with pytest.raises(ValueError):
        CollisionAwareConfig(contour_grad_threshold=-1.0)
    assert CollisionAwareConfig(d_uav=0.4).inflation_radius == pytest.approx(0.2)
