import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssl2d import autodiff as ad
from ssl2d import geom
from ssl2d.acoustics import make_label
from ssl2d.etlayer import FeatureMapStack, et_backward, et_forward, et_layer, warp_matrix
from ssl2d.geom import ARRAY_GRID, GridSpec, Pose2D

G = ARRAY_GRID
poses = st.tuples(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-np.pi, np.pi))


def blobs(grid, centers, sigma_cells=2.5):
    return make_label(centers, grid, sigma=sigma_cells * grid.cell_size).values


def inverse(p):
    return geom.invert(geom.pose_to_transform(Pose2D(*p))).to_pose().as_tuple()


class TestExactCases:
    def test_identity_bit_exact(self, rng):
        z = FeatureMapStack(rng.normal(size=(25, 25, 3)))
        assert np.array_equal(et_forward(z, (0, 0, 0)).values, z.values)

    def test_identity_backward(self, rng):
        g = FeatureMapStack(rng.normal(size=(25, 25, 2)))
        assert np.array_equal(et_backward(g, (0, 0, 0)).values, g.values)

    @pytest.mark.parametrize("axis,sign", [(1, 1), (1, -1), (0, 1), (0, -1)])
    def test_one_cell_shift(self, rng, axis, sign):
        z = rng.normal(size=(25, 25, 2))
        d = [0.0, 0.0]
        d[1 - axis] = sign * G.cell_size  # x moves columns (axis 1), y moves rows
        out = et_forward(FeatureMapStack(z), (d[0], d[1], 0.0)).values
        expect = np.zeros_like(z)
        src = [slice(None)] * 2
        dst = [slice(None)] * 2
        if sign > 0:
            dst[axis], src[axis] = slice(1, None), slice(None, -1)
        else:
            dst[axis], src[axis] = slice(None, -1), slice(1, None)
        expect[tuple(dst)] = z[tuple(src)]
        assert np.array_equal(out, expect)

    def test_quarter_turn_is_exact_rotation(self, rng):
        z = rng.normal(size=(25, 25))
        out = et_forward(FeatureMapStack(z), (0, 0, np.pi / 2)).values[..., 0]
        # rows grow with +y, so a counter-clockwise turn is rot90 with k=-1 in array order
        np.testing.assert_allclose(out, np.rot90(z, -1), atol=1e-12)

    def test_zero_upstream(self):
        g = FeatureMapStack(np.zeros((25, 25, 1)))
        assert not np.any(et_backward(g, (0.3, -0.2, 1.0)).values)

    @given(poses, st.integers(3, 21), st.integers(3, 21))
    def test_impulse_lands_near_transformed_point(self, pose, r, c):
        z = np.zeros((25, 25))
        z[r, c] = 1.0
        p = G.cell_centers()[r, c]
        q = geom.apply(geom.pose_to_transform(Pose2D(*pose)), p)
        if not G.contains(q, margin=G.cell_size):
            return
        out = et_forward(FeatureMapStack(z), pose).values[..., 0]
        want = np.round(geom.world_to_grid(G, q)).astype(int)
        got = np.unravel_index(np.argmax(out), out.shape)
        assert abs(got[0] - want[1]) <= 1 and abs(got[1] - want[0]) <= 1
        assert out.max() >= 0.25


class TestProperties:
    @given(poses, st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, pose, a, b):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(2, 25, 25, 2))
        lhs = et_forward(FeatureMapStack(a * x + b * y), pose).values
        rhs = a * et_forward(FeatureMapStack(x), pose).values + b * et_forward(FeatureMapStack(y), pose).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    @given(poses)
    def test_channel_independence(self, pose):
        z = np.random.default_rng(1).normal(size=(25, 25, 3))
        joint = et_forward(FeatureMapStack(z), pose).values
        for k in range(3):
            assert np.array_equal(joint[..., k], et_forward(FeatureMapStack(z[..., k]), pose).values[..., 0])

    @given(st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-np.pi, np.pi)))
    def test_approximate_inverse_on_smooth_maps(self, pose):
        z = blobs(G, [(0.3, -0.4), (-0.5, 0.6)])
        back = et_forward(et_forward(FeatureMapStack(z), pose), inverse(pose)).values[..., 0]
        inner = (slice(6, 19), slice(6, 19))
        assert np.abs(back[inner] - z[inner]).mean() <= 0.05

    @given(poses)
    def test_output_bounded_by_neighbour_max(self, pose):
        z = np.random.default_rng(2).uniform(size=(25, 25))
        m = warp_matrix(pose).tocsr()
        out = m @ z.ravel()
        flat = z.ravel()
        for i in range(0, 625, 7):
            cols = m.indices[m.indptr[i] : m.indptr[i + 1]]
            bound = flat[cols].max() if len(cols) else 0.0
            assert out[i] <= bound + 1e-12

    @given(poses)
    def test_backward_is_transpose(self, pose):
        rng = np.random.default_rng(3)
        x, g = rng.normal(size=(2, 25, 25, 2))
        lhs = np.sum(et_forward(FeatureMapStack(x), pose).values * g)
        rhs = np.sum(x * et_backward(FeatureMapStack(g), pose).values)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)

    @given(st.tuples(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(-np.pi, np.pi)),
           st.tuples(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0)))
    def test_label_equivariance(self, pose, src):
        # sources in frame 2, at least 1 m inside the grid border in both frames
        tf = geom.pose_to_transform(Pose2D(*pose))
        moved = tuple(geom.apply(tf, np.asarray(src)))
        if not (G.contains(src, margin=1.0) and G.contains(moved, margin=1.0)):
            return
        warped = et_forward(FeatureMapStack(make_label([src], G).values), pose).values[..., 0]
        oracle = make_label([moved], G).values
        assert np.abs(warped - oracle).mean() <= 0.02

    def test_deterministic(self, rng):
        z = rng.normal(size=(3, 25, 25, 2))
        ps = [(0.1, 0.2, 0.3), (-0.4, 0.0, 2.0), (0, 0, 0)]
        assert np.array_equal(et_layer(z, ps).data, et_layer(z, ps).data)


class TestLayer:
    def test_batched_matches_per_sample(self, rng):
        z = rng.normal(size=(3, 25, 25, 2))
        ps = [(0.1, 0.2, 0.3), (-0.4, 0.0, 2.0), (0.5, -0.5, -1.0)]
        y = et_layer(z, ps).data
        for b in range(3):
            assert np.array_equal(y[b], et_forward(FeatureMapStack(z[b]), ps[b]).values)

    def test_gradient_small_grid_finite_difference(self, rng):
        from ssl2d import gradcheck

        grid = GridSpec(8, 8, (-0.96, -0.96), 0.24)
        res = gradcheck.check("et", lambda z: et_layer(z, [(0.13, -0.07, 0.6)], grid), [rng.normal(size=(1, 8, 8, 2))], rng)
        assert res.rel_error <= 1e-6

    def test_no_pose_gradient_and_shape_errors(self, rng):
        with pytest.raises(ValueError):
            et_layer(np.zeros((1, 24, 25, 1)), [(0, 0, 0)])
        with pytest.raises(ValueError):
            et_layer(np.zeros((2, 25, 25, 1)), [(0, 0, 0)])
        with pytest.raises(ValueError):
            FeatureMapStack(np.full((25, 25), np.nan))
        z = ad.Tensor(rng.normal(size=(1, 25, 25, 1)), requires_grad=True)
        y = et_layer(z, [(0, 0, 0)])
        assert len(y._parents) == 1
