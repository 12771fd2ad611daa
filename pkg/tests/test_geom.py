import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssl2d import geom
from ssl2d.geom import ARRAY_GRID, ROOM_GRID, GridSpec, Pose2D

coord = st.floats(-10, 10, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2D, coord, coord, angle)


def T(*p):
    return geom.pose_to_transform(Pose2D(*p))


class TestPose:
    def test_theta_wrapped(self):
        assert Pose2D(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
        assert Pose2D(0, 0, -math.pi).theta == pytest.approx(math.pi)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Pose2D(float("nan"), 0, 0)

    @given(angle)
    def test_wrap_range(self, t):
        w = geom.wrap_angle(t)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(t), abs_tol=1e-9)


class TestTransform:
    def test_identity_pose(self):
        np.testing.assert_array_equal(T(0, 0, 0).m, np.eye(3))

    def test_translation_pose(self):
        np.testing.assert_array_equal(T(1, 2, 0).m, [[1, 0, 1], [0, 1, 2], [0, 0, 1]])

    def test_quarter_turn(self):
        np.testing.assert_allclose(T(0, 0, math.pi / 2).m, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)

    def test_rejects_bad_last_row(self):
        m = np.eye(3)
        m[2, 0] = 1
        with pytest.raises(ValueError):
            geom.EuclideanTransform2D(m)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            geom.EuclideanTransform2D(np.diag([2.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            geom.EuclideanTransform2D(np.diag([1.0, -1.0, 1.0]))

    def test_invert_examples(self):
        np.testing.assert_array_equal(geom.invert(geom.IDENTITY).m, np.eye(3))
        np.testing.assert_allclose(geom.invert(T(1, 0, 0)).m, T(-1, 0, 0).m)
        t = T(0, 0, math.pi / 3)
        back = geom.apply(geom.invert(t), geom.apply(t, (0.5, 0.7)))
        np.testing.assert_allclose(back, (0.5, 0.7), atol=1e-12)

    def test_apply_examples(self):
        np.testing.assert_array_equal(geom.apply(geom.IDENTITY, (3, 4)), (3, 4))
        np.testing.assert_array_equal(geom.apply(T(1, 2, 0), (0, 0)), (1, 2))
        np.testing.assert_allclose(geom.apply(T(0, 0, math.pi / 2), (1, 0)), (0, 1), atol=1e-15)

    def test_compose_examples(self):
        b = T(0.3, -1, 2)
        np.testing.assert_array_equal(geom.compose(geom.IDENTITY, b).m, b.m)
        np.testing.assert_allclose(geom.compose(T(1, 0, 0), T(0, 2, 0)).m, T(1, 2, 0).m)
        np.testing.assert_allclose(geom.compose(T(0, 0, math.pi / 2), T(0, 0, math.pi / 2)).m, T(0, 0, math.pi).m, atol=1e-12)

    @given(poses)
    def test_inverse_times_self_is_identity(self, p):
        t = geom.pose_to_transform(p)
        np.testing.assert_allclose((geom.invert(t) @ t).m, np.eye(3), atol=1e-12)

    @given(poses, poses, poses)
    def test_compose_associative(self, a, b, c):
        a, b, c = map(geom.pose_to_transform, (a, b, c))
        np.testing.assert_allclose(((a @ b) @ c).m, (a @ (b @ c)).m, atol=1e-12)

    @given(poses, st.lists(st.tuples(coord, coord), min_size=2, max_size=6))
    def test_apply_is_rigid(self, p, pts):
        pts = np.array(pts)
        out = geom.apply(geom.pose_to_transform(p), pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(d1, d0, atol=1e-9)

    @given(poses)
    def test_pose_reextraction(self, p):
        q = geom.pose_to_transform(p).to_pose()
        assert abs(q.tx - p.tx) <= 1e-12 and abs(q.ty - p.ty) <= 1e-12
        assert abs(geom.wrap_angle(q.theta - p.theta)) <= 1e-12

    @given(poses, poses)
    def test_relative_pose(self, a, b):
        rel = geom.pose_to_transform(geom.relative_pose(a, b))
        np.testing.assert_allclose((geom.pose_to_transform(a) @ rel).m, geom.pose_to_transform(b).m, atol=1e-9)


class TestGrid:
    def test_room_grid_examples(self):
        np.testing.assert_allclose(geom.grid_to_world(ROOM_GRID, (0, 0)), (0.12, 0.12))
        np.testing.assert_array_equal(geom.world_to_grid(ROOM_GRID, (3.0, 3.0)), (12.0, 12.0))

    @pytest.mark.parametrize("grid", [ROOM_GRID, ARRAY_GRID, GridSpec(7, 5, (-1.3, 0.7), 0.1)])
    def test_round_trip_exact_on_every_cell(self, grid):
        c = np.stack(np.meshgrid(np.arange(grid.width_cells), np.arange(grid.height_cells)), -1).reshape(-1, 2)
        np.testing.assert_array_equal(geom.world_to_grid(grid, geom.grid_to_world(grid, c)), c)

    def test_array_grid_centres_the_array(self):
        np.testing.assert_array_equal(geom.world_to_grid(ARRAY_GRID, (0.0, 0.0)), (12.0, 12.0))

    def test_shape_and_centers(self):
        g = GridSpec(4, 3, (0, 0), 1.0)
        assert g.shape == (3, 4)
        c = g.cell_centers()
        assert c.shape == (3, 4, 2)
        np.testing.assert_array_equal(c[2, 1], (1.5, 2.5))

    @pytest.mark.parametrize("kw", [dict(cell_size=0), dict(width_cells=1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GridSpec(**kw)
