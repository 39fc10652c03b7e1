import numpy as np
import pytest

from kpfield.synthetic import KINDS, ShapeSpec, generate, generate_shape


class TestSphere:
    def test_all_samples_on_radius(self):
        shape = generate_shape("sphere", n_points=2048, seed=0, radius=0.4)
        radii = np.linalg.norm(shape.cloud.points, axis=1)
        np.testing.assert_allclose(radii, 0.4, atol=1e-9)

    def test_octant_uniformity(self):
        n = 10_000
        shape = generate_shape("sphere", n_points=n, seed=3)
        octant = (
            (shape.cloud.points[:, 0] > 0).astype(int) * 4
            + (shape.cloud.points[:, 1] > 0).astype(int) * 2
            + (shape.cloud.points[:, 2] > 0).astype(int)
        )
        counts = np.bincount(octant, minlength=8)
        p = 1.0 / 8.0
        sigma = np.sqrt(n * p * (1 - p))
        assert (np.abs(counts - n * p) <= 3 * sigma).all()

    def test_distance_oracle(self):
        shape = generate_shape("sphere", n_points=8, radius=0.4)
        d = shape.surface_distance([[0.0, 0, 0], [0, 0, 0.9], [0, 0.4, 0]])
        np.testing.assert_allclose(d, [0.4, 0.5, 0.0], atol=1e-12)

    def test_no_corners(self):
        assert generate_shape("sphere", n_points=4).corners.shape == (0, 3)


class TestBox:
    def test_corners_at_analytic_positions(self):
        shape = generate_shape("box", n_points=16, half_x=0.4, half_y=0.28, half_z=0.2)
        assert shape.corners.shape == (8, 3)
        got = {tuple(c) for c in shape.corners}
        want = {
            (sx * 0.4, sy * 0.28, sz * 0.2)
            for sx in (-1, 1)
            for sy in (-1, 1)
            for sz in (-1, 1)
        }
        assert got == want

    def test_samples_on_faces(self):
        shape = generate_shape("box", n_points=500, seed=1)
        d = shape.surface_distance(shape.cloud.points)
        assert d.max() < 1e-9

    def test_distance_oracle(self):
        shape = generate_shape("box", n_points=4, half_x=0.4, half_y=0.3, half_z=0.2)
        queries = [
            [0.0, 0.0, 0.0],  # center: nearest face is z at 0.2
            [3.4, 0.0, 0.0],  # beyond +x face: 3.0
            [0.5, 0.4, 0.0],  # outside the xy edge: hypot(0.1, 0.1)
        ]
        d = shape.surface_distance(queries)
        np.testing.assert_allclose(d, [0.2, 3.0, np.hypot(0.1, 0.1)], atol=1e-12)

    def test_face_area_weighting(self):
        # half extents (0.4, 0.3, 0.2): z faces are largest (0.8 x 0.6)
        shape = generate_shape(
            "box", n_points=20_000, seed=5, half_x=0.4, half_y=0.3, half_z=0.2
        )
        pts = shape.cloud.points
        on_z = np.isclose(np.abs(pts[:, 2]), 0.2).sum()
        total_area = 2 * (0.8 * 0.6 + 0.8 * 0.4 + 0.6 * 0.4)
        p = 2 * 0.8 * 0.6 / total_area
        sigma = np.sqrt(20_000 * p * (1 - p))
        assert abs(on_z - 20_000 * p) <= 4 * sigma


class TestCylinder:
    def test_on_surface(self):
        shape = generate_shape("cylinder", n_points=2000, seed=2)
        assert shape.surface_distance(shape.cloud.points).max() < 1e-9

    def test_distance_oracle(self):
        shape = generate_shape("cylinder", n_points=4, radius=0.3, half_height=0.4)
        queries = [
            [0.0, 0.0, 0.0],  # interior: wall at 0.3 beats caps at 0.4
            [0.0, 0.0, 1.0],  # above top cap: 0.6
            [0.8, 0.0, 0.0],  # beyond wall: 0.5
            [0.4, 0.0, 0.5],  # outside rim edge: hypot(0.1, 0.1)
        ]
        d = shape.surface_distance(queries)
        np.testing.assert_allclose(d, [0.3, 0.6, 0.5, np.hypot(0.1, 0.1)], atol=1e-12)

    def test_wall_points_at_radius(self):
        shape = generate_shape("cylinder", n_points=3000, seed=4, radius=0.3, half_height=0.4)
        pts = shape.cloud.points
        wall = np.abs(np.abs(pts[:, 2]) - 0.4) > 1e-9
        np.testing.assert_allclose(np.hypot(pts[wall, 0], pts[wall, 1]), 0.3, atol=1e-9)


class TestLBracket:
    def test_corner_count(self):
        shape = generate_shape("l-bracket", n_points=16)
        assert shape.corners.shape == (12, 3)

    def test_on_surface(self):
        shape = generate_shape("l-bracket", n_points=2000, seed=6)
        assert shape.surface_distance(shape.cloud.points).max() < 1e-9

    def test_interior_point_near_welded_face(self):
        # Raw-frame point (0.15, 0.29, 0.15) sits inside the first leg, 0.01
        # from the plane y = width. That plane section is interior weld, not
        # surface, so the true distance is 0.15 (to the x = 0 wall and caps).
        shape = generate_shape("l-bracket", n_points=4, leg=0.8, width=0.3, height=0.3)
        shift = np.array([-0.4, -0.4, -0.15])
        q = np.array([[0.15, 0.29, 0.15]]) + shift
        np.testing.assert_allclose(shape.surface_distance(q), [0.15], atol=1e-12)

    def test_notch_point(self):
        shape = generate_shape("l-bracket", n_points=4, leg=0.8, width=0.3, height=0.3)
        shift = np.array([-0.4, -0.4, -0.15])
        q = np.array([[0.4, 0.4, 0.15]]) + shift  # in the notch, off both inner walls
        np.testing.assert_allclose(shape.surface_distance(q), [0.1], atol=1e-12)

    def test_width_must_be_smaller_than_leg(self):
        with pytest.raises(ValueError, match="width"):
            generate_shape("l-bracket", n_points=4, leg=0.3, width=0.3)


class TestTwoBox:
    def test_sixteen_corners(self):
        shape = generate_shape("two-box", n_points=16)
        assert shape.corners.shape == (16, 3)

    def test_on_surface(self):
        shape = generate_shape("two-box", n_points=2000, seed=7)
        assert shape.surface_distance(shape.cloud.points).max() < 1e-9

    def test_distance_is_min_over_boxes(self):
        shape = generate_shape("two-box", n_points=4)
        # default centers: A at (-0.45, 0, 0), B at (0.45, 0.08, -0.06)
        mid = np.array([[0.0, 0.0, 0.0]])
        d_a = 0.45 - 0.30  # to A's +x face
        d_b = 0.45 - 0.18  # to B's -x face... further
        np.testing.assert_allclose(shape.surface_distance(mid), [min(d_a, d_b)], atol=1e-12)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            generate_shape("two-box", n_points=4, separation=0.1)


class TestContract:
    @pytest.mark.parametrize("kind", KINDS)
    def test_samples_on_surface_and_occupied(self, kind):
        shape = generate_shape(kind, n_points=512, seed=11)
        assert shape.surface_distance(shape.cloud.points).max() < 1e-9
        assert shape.occupancy(shape.cloud.points, shell=0.01).all()

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic_per_seed(self, kind):
        a = generate(ShapeSpec(kind, n_points=128, seed=9))
        b = generate(ShapeSpec(kind, n_points=128, seed=9))
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        c = generate(ShapeSpec(kind, n_points=128, seed=10))
        assert not np.array_equal(a.cloud.points, c.cloud.points)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            ShapeSpec("torus", 16)

    def test_unknown_param(self):
        with pytest.raises(ValueError, match="unknown parameter"):
            ShapeSpec("sphere", 16, params={"diameter": 1.0})

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            ShapeSpec("sphere", 0)

    def test_occupancy_shell_validation(self):
        shape = generate_shape("sphere", n_points=8)
        with pytest.raises(ValueError):
            shape.occupancy(np.zeros((1, 3)), shell=0.0)
