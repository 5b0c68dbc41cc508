"""Tensor engine contract: op semantics, kernel identities, gradients,
optimizer arithmetic and weight serialization."""

import numpy as np
import pytest

from msdet import tensor as T
from msdet.errors import ConfigurationError, DimensionError, UsageError
from msdet.tensor import BatchNormParams, ConvSpec, Tensor


def rt(rng, *shape, grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestConv:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, None, ConvSpec(1, 1, 3, 3))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rt(rng, 2, 3, 5, 7)
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(w), None, ConvSpec(3, 3, 1, 1))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilation_equals_zero_inflated_kernel(self):
        # oracle: build the inflated kernel explicitly and compare
        rng = np.random.default_rng(2)
        for trial in range(50):
            x = rt(rng, 1, 1, 9, 9)
            k = rng.standard_normal((1, 1, 3, 3))
            dilated = T.conv2d(x, Tensor(k), None, ConvSpec(1, 1, 3, 3, dilation=2))
            inflated = np.zeros((1, 1, 5, 5))
            inflated[0, 0, ::2, ::2] = k[0, 0]
            dense = T.conv2d(x, Tensor(inflated), None, ConvSpec(1, 1, 5, 5))
            assert np.abs(dilated.data - dense.data).max() <= 1e-12

    def test_separable_rank1_identity(self):
        # 1xk then kx1 depthwise with "same" padding equals the k x k
        # depthwise conv with the rank-1 outer-product kernel, exactly
        rng = np.random.default_rng(3)
        for trial in range(50):
            c = int(rng.integers(1, 5))
            k = int(rng.choice([3, 5, 7]))
            x = rt(rng, 1, c, 10, 10)
            u = rng.standard_normal((c, k))
            v = rng.standard_normal((c, k))
            pad = (k - 1) // 2
            h = T.conv2d(
                x, Tensor(v[:, None, None, :]), None,
                ConvSpec(c, c, 1, k, padding=(0, pad), groups=c),
            )
            hv = T.conv2d(
                h, Tensor(u[:, None, :, None]), None,
                ConvSpec(c, c, k, 1, padding=(pad, 0), groups=c),
            )
            full_k = u[:, None, :, None] * v[:, None, None, :]
            full = T.conv2d(x, Tensor(full_k), None, ConvSpec(c, c, k, k, padding=pad, groups=c))
            assert np.abs(hv.data - full.data).max() <= 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            spec = ConvSpec(3, 4, 3, 3, padding=1, has_bias=False)
            w = rt(rng, 4, 3, 3, 3)
            x, y = rt(rng, 2, 3, 6, 6), rt(rng, 2, 3, 6, 6)
            a, b = rng.standard_normal(2)
            lhs = T.conv2d(Tensor(a * x.data + b * y.data), w, None, spec)
            rhs = a * T.conv2d(x, w, None, spec).data + b * T.conv2d(y, w, None, spec).data
            assert np.abs(lhs.data - rhs).max() <= 1e-10

    def test_shape_errors_name_axis(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 3, 3, 3)))
        with pytest.raises(DimensionError, match="channel axis"):
            T.conv2d(x, w, None, ConvSpec(4, 2, 3, 3))
        with pytest.raises(ConfigurationError, match="groups"):
            ConvSpec(3, 2, 3, 3, groups=2)
        with pytest.raises(DimensionError, match="kernel extent"):
            T.conv2d(x, w, None, ConvSpec(3, 2, 3, 3, dilation=2))


class TestElementwise:
    def test_identities(self):
        rng = np.random.default_rng(5)
        x = rt(rng, 1, 2, 3, 3)
        np.testing.assert_array_equal(
            T.elementwise(x, Tensor(np.ones_like(x.data)), "hadamard").data, x.data
        )
        np.testing.assert_array_equal(
            T.elementwise(x, Tensor(np.zeros_like(x.data)), "add").data, x.data
        )

    def test_hadamard_square(self):
        x = Tensor(np.array([2.0, 3.0]))
        np.testing.assert_array_equal(T.elementwise(x, x, "hadamard").data, [4.0, 9.0])

    def test_bad_broadcast(self):
        with pytest.raises(DimensionError):
            T.elementwise(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))), "add")


class TestConcatSplit:
    def test_shapes(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 3, 4, 4)))
        assert T.concat_channels([a, b]).shape == (1, 5, 4, 4)

    def test_inverse_pair(self):
        rng = np.random.default_rng(6)
        a, b = rt(rng, 2, 3, 4, 4), rt(rng, 2, 2, 4, 4)
        a2, b2 = T.split_channels(T.concat_channels([a, b]), [3, 2])
        np.testing.assert_array_equal(a2.data, a.data)
        np.testing.assert_array_equal(b2.data, b.data)

    def test_single_part(self):
        a = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(T.concat_channels([a]).data, a.data)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 4)))])


class TestPool:
    def test_avg(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        assert T.pool(x, "avg", window=2).data[0, 0, 0, 0] == 2.5

    def test_max_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), 7.0))
        assert (T.pool(x, "max", window=2).data == 7.0).all()

    def test_global_avg(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = T.pool(x, "global_avg")
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 2.5

    def test_max_tie_routes_to_first(self):
        x = Tensor(np.array([[5.0, 5.0], [5.0, 5.0]])[None, None], requires_grad=True)
        out = T.pool(x, "max", window=2)
        T.backward(out.sum())
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_zero_window(self):
        with pytest.raises(ConfigurationError):
            T.pool(Tensor(np.zeros((1, 1, 4, 4))), "avg", window=0)


class TestResize:
    def test_upsample_2x(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        out = T.resize_nearest(x, 4, 4)
        expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0, 0], expect)

    def test_identity(self):
        rng = np.random.default_rng(7)
        x = rt(rng, 1, 2, 5, 5)
        np.testing.assert_array_equal(T.resize_nearest(x, 5, 5).data, x.data)

    def test_downsample_picks_floor_indices(self):
        # floor(dst * 4 / 2) enumerates to rows/cols {0, 2}
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = T.resize_nearest(x, 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[0.0, 2.0], [8.0, 10.0]])


class TestActivation:
    def test_pinned_values(self):
        z = Tensor(np.array([0.0]))
        assert T.activation(z, "sigmoid").data[0] == 0.5
        assert T.activation(Tensor(np.array([-1.0, 2.0])), "relu").data.tolist() == [0.0, 2.0]
        assert T.activation(z, "silu").data[0] == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            T.activation(Tensor(np.array([0.0])), "tanhish")


class TestBatchNorm:
    def test_train_normalizes(self):
        # output variance is var/(var+eps); with eps 1e-5 the 1e-6 tolerance
        # needs input variance above ~10, hence the scale of 5
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)) * 5.0 + 1.5)
        params = BatchNormParams.create(3)
        out = T.batch_norm(x, params, "train")
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-6

    def test_infer_affine(self):
        params = BatchNormParams.create(1)
        params.gamma.data[:] = 2.0
        params.beta.data[:] = 1.0
        out = T.batch_norm(Tensor(np.ones((1, 1, 2, 2))), params, "infer")
        assert np.abs(out.data - 3.0).max() < 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.batch_norm(Tensor(np.zeros((1, 2, 2, 2))), BatchNormParams.create(3), "train")


class TestBackward:
    def test_sum_gives_ones(self):
        rng = np.random.default_rng(9)
        x = rt(rng, 2, 3, grad=True)
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        rng = np.random.default_rng(10)
        x = rt(rng, 4, grad=True)
        T.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_accumulation_until_zeroed(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(x.sum())
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_nonscalar_without_seed(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(x * 2.0)

    def test_composite_conv_silu_pool_matches_fd(self):
        rng = np.random.default_rng(11)
        x = rt(rng, 1, 2, 6, 6, grad=True)
        w = rt(rng, 3, 2, 3, 3, grad=True)
        spec = ConvSpec(2, 3, 3, 3, padding=1, has_bias=False)

        def f(_):
            return T.pool(T.silu(T.conv2d(x, w, None, spec)), "avg", window=2).sum()

        T.backward(f(None))
        for t in (x, w):
            fd = T.finite_diff_grad(f, t, h=1e-3)
            scale = max(np.abs(fd.data).max(), 1e-6)
            assert np.abs(t.grad - fd.data).max() / scale <= 1e-4
            t.zero_grad()


class TestFiniteDiff:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]))
        g = T.finite_diff_grad(lambda t: (t * t).sum(), x, h=1e-3)
        np.testing.assert_allclose(g.data, [2.0, 4.0], atol=1e-6)

    def test_linear_exact(self):
        x = Tensor(np.array([3.0, -1.0, 2.0]))
        g = T.finite_diff_grad(lambda t: (t * Tensor(np.array([2.0, 5.0, -1.0]))).sum(), x, h=0.25)
        np.testing.assert_allclose(g.data, [2.0, 5.0, -1.0], atol=1e-10)


class TestSgd:
    def test_single_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        v = T.make_velocities([p])
        T.sgd_step([p], [np.array([1.0])], v, lr=0.1)
        np.testing.assert_allclose(p.data, [0.9])

    def test_zero_grad_no_motion(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        v = T.make_velocities([p])
        T.sgd_step([p], [np.zeros(2)], v, lr=0.5)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_momentum_unroll(self):
        # v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        p = Tensor(np.array([0.0]), requires_grad=True)
        v = T.make_velocities([p])
        T.sgd_step([p], [np.array([1.0])], v, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [-0.1])
        T.sgd_step([p], [np.array([1.0])], v, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [-0.29])

    def test_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        v = T.make_velocities([p])
        T.sgd_step([p], [np.array([0.0])], v, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 1.0])

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(DimensionError):
            T.sgd_step([p], [np.zeros(3)], T.make_velocities([p]), lr=0.1)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
            out = T.pool(T.silu(T.conv2d(x, w, None, ConvSpec(3, 4, 3, 3, padding=1))), "avg", window=2)
            T.backward(out.sum())
            return out.data.copy(), x.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert (o1 == o2).all() and (g1 == g2).all()


class TestSerialization:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        named = [
            ("backbone.stem.w", rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
            ("lska.h5", rng.standard_normal((4, 1, 1, 5)).astype(np.float32)),
            ("head.bias", rng.standard_normal(7).astype(np.float32)),
        ]
        prefix = str(tmp_path / "weights")
        T.save_weights(named, prefix)
        loaded = T.load_weights(prefix)
        assert list(loaded) == [n for n, _ in named]
        for name, arr in named:
            assert loaded[name].dtype == np.float32
            assert (loaded[name] == arr).all()

    def test_truncated_blob(self, tmp_path):
        from msdet.errors import FormatError

        prefix = str(tmp_path / "weights")
        T.save_weights([("a", np.zeros(4, dtype=np.float32))], prefix)
        with open(prefix + ".bin", "wb") as f:
            f.write(b"\x00" * 8)
        with pytest.raises(FormatError, match="truncated"):
            T.load_weights(prefix)
