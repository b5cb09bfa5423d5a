import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellfit import geometry
from cellfit.geometry import Curve


def ngon(n, r=1.0, center=(0.0, 0.0)):
    th = 2 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)])


UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class TestCurve:
    def test_rejects_too_few_vertices(self):
        with pytest.raises(ValueError):
            Curve([[0, 0], [1, 0]])

    def test_rejects_clockwise(self):
        with pytest.raises(ValueError):
            Curve(UNIT_SQUARE[::-1])

    def test_rejects_repeated_vertex(self):
        with pytest.raises(ValueError):
            Curve([[0, 0], [1, 0], [1, 0], [0, 1]])

    def test_rejects_self_intersection(self):
        bowtie = [[0, 0], [1, 1], [1, 0], [0, 1]]
        with pytest.raises(ValueError):
            Curve(bowtie)

    def test_vertices_read_only(self):
        c = Curve(UNIT_SQUARE)
        with pytest.raises(ValueError):
            c.vertices[0, 0] = 3.0


class TestArea:
    def test_unit_square(self):
        assert geometry.enclosed_area(UNIT_SQUARE) == pytest.approx(1.0, abs=1e-15)

    def test_translated_square(self):
        assert geometry.enclosed_area(UNIT_SQUARE + [5.0, 7.0]) == pytest.approx(1.0, abs=1e-12)

    def test_regular_polygon(self):
        n = 128
        expected = 0.5 * n * np.sin(2 * np.pi / n)
        assert geometry.enclosed_area(ngon(n)) == pytest.approx(expected, rel=1e-13)
        assert expected == pytest.approx(3.14034, abs=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 2 * np.pi))
    def test_rigid_motion_invariance(self, dx, dy, angle):
        x = ngon(17, 1.3) * [1.0, 0.6]
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        moved = x @ rot.T + [dx, dy]
        a0 = geometry.enclosed_area(x)
        assert geometry.enclosed_area(moved) == pytest.approx(a0, rel=1e-12)


class TestCurvature:
    def test_collinear_stencil_is_flat(self):
        k = geometry.vertex_curvature([0.0, 0.0], [1.0, 0.0], [2.0, 0.0])
        assert np.array_equal(k, [0.0, 0.0])

    @pytest.mark.parametrize("r,tol", [(1.0, 1e-3), (2.0, 5e-4)])
    def test_regular_polygon_magnitude(self, r, tol):
        x = ngon(128, r)
        k = geometry.discrete_curvature_vector(Curve(x))
        assert np.max(np.abs(np.linalg.norm(k, axis=1) - 1 / r)) < tol
        # points toward the centre
        cos = np.sum(k * -x, axis=1) / (np.linalg.norm(k, axis=1) * np.linalg.norm(x, axis=1))
        assert np.all(cos > 1 - 1e-12)

    def test_mean_curvature_sign(self):
        h = geometry.mean_curvature(Curve(ngon(64)))
        assert np.all(h > 0)

    def test_converges_second_order_on_sampled_ellipse(self):
        # a regular polygon is exact, so use an ellipse sampled uniformly in angle
        errs = []
        for n in (32, 64, 128):
            th = 2 * np.pi * np.arange(n) / n
            x = np.column_stack([2 * np.cos(th), np.sin(th)])
            exact = 2.0 / (4 * np.sin(th) ** 2 + np.cos(th) ** 2) ** 1.5
            k = np.linalg.norm(geometry.discrete_curvature_vector(Curve(x)), axis=1)
            errs.append(np.max(np.abs(k - exact)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.8)

    def test_degenerate_edge_rejected(self):
        with pytest.raises(ValueError):
            geometry.vertex_curvature([0.0, 0.0], [0.0, 0.0], [1.0, 0.0])


class TestSignedDistance:
    def test_center_of_circle(self):
        c = Curve(ngon(128))
        d = geometry.signed_distance(c, [0.0, 0.0])
        assert d == pytest.approx(-np.cos(np.pi / 128), abs=1e-14)

    def test_outside_point(self):
        assert geometry.signed_distance(Curve(ngon(128)), [2.0, 0.0]) == pytest.approx(1.0, abs=1e-12)

    def test_on_vertex_is_zero(self):
        x = ngon(16)
        assert geometry.signed_distance(Curve(x), x[3]) == 0.0

    def test_sign_flips_once_along_ray(self):
        c = Curve(ngon(40) * [1.5, 1.0])
        xs = np.linspace(-3, 3, 601)
        pts = np.column_stack([xs, np.full_like(xs, 0.123)])
        s = np.sign(geometry.signed_distance(c, pts))
        assert np.count_nonzero(np.diff(s[xs > 0]) != 0) == 1

    def test_continuity_near_curve(self):
        x = ngon(50)
        c = Curve(x)
        mid = 0.5 * (x[0] + x[1])
        for eps in (1e-3, 1e-6):
            assert abs(geometry.signed_distance(c, mid * (1 + eps))) < 2 * eps
            assert abs(geometry.signed_distance(c, mid * (1 - eps))) < 2 * eps

    def test_square_inside_outside(self):
        c = Curve(UNIT_SQUARE)
        d = geometry.signed_distance(c, [[0.5, 0.5], [0.5, 1.5], [0.25, 0.5]])
        assert np.allclose(d, [-0.5, 0.5, -0.25])


class TestClosestPoints:
    def test_two_point_example(self):
        d, i = geometry.hausdorff_point_distance([[0, 0], [1, 0]], [0.25, 0])
        assert d == pytest.approx(0.25)
        assert i == 0

    def test_member_distance_zero(self):
        p = np.array([[0.3, 0.1], [2.0, 1.0]])
        d, i = geometry.hausdorff_point_distance(p, p[1])
        assert d == 0.0 and i == 1

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            geometry.hausdorff_point_distance(np.empty((0, 2)), [0.0, 0.0])

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, (1000, 2))
        q = rng.uniform(-1.5, 1.5, (100, 2))
        d, idx = geometry.closest_points(pts, q)
        diff = q[:, None, :] - pts[None, :, :]
        full = np.hypot(diff[..., 0], diff[..., 1])
        assert np.array_equal(idx, np.argmin(full, axis=1))
        assert np.array_equal(d, full[np.arange(100), idx])

    def test_large_sets_use_tree_with_same_answer(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, (3000, 2))
        q = rng.uniform(-1, 1, (2000, 2))
        d, idx = geometry.closest_points(pts, q)
        full = np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2)
        assert np.array_equal(idx, np.argmin(full, axis=1))
        assert np.allclose(d, full.min(axis=1), rtol=0, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_lower_bound_property(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(30, 2))
        x = rng.normal(size=2)
        d, i = geometry.hausdorff_point_distance(pts, x)
        dist = np.hypot(*(pts - x).T)
        assert np.all(d <= dist)
        assert d == dist[i]


class TestGridKernels:
    def test_band_distance_matches_brute_force(self):
        x = ngon(37, 1.0) * [1.3, 0.8]
        c = Curve(x)
        h = 0.05
        xs = -2 + h * np.arange(81)
        ys = -2 + h * np.arange(81)
        dist, edge, t = geometry.grid_band_distance(x, (-2.0, -2.0), h, (81, 81), 0.4)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        ref, _, _ = geometry.closest_point_on_curve(c, pts)
        ref = ref.reshape(81, 81)
        band = ref < 0.4
        assert np.allclose(dist[band], ref[band], atol=1e-13)
        assert np.all(np.isinf(dist[~band]) | (dist[~band] >= 0.4 - 1e-12))

    def test_grid_inside_matches_contains(self):
        x = ngon(23, 1.0) * [1.0, 0.5] + [0.1, 0.0]
        c = Curve(x)
        xs = np.linspace(-1.5, 1.5, 61)
        ys = np.linspace(-1.0, 1.0, 41)
        inside = geometry.grid_inside(x, xs, ys)
        gx, gy = np.meshgrid(xs, ys)
        ref = geometry.contains(c, np.column_stack([gx.ravel(), gy.ravel()])).reshape(41, 61)
        assert np.array_equal(inside, ref)
