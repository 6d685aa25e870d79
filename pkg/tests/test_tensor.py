"""Numeric core: op semantics against independent oracles, autodiff integrity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keyformer import tensor as T
from keyformer.errors import ContractError, DimensionError
from keyformer.tensor import RngState, Tensor, backward, grad_check


def _matmul_oracle(a, b):
    # naive triple loop, float64
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


def _conv1d_oracle(x, w, b):
    # explicit padded summation, float64
    c_out, c_in, k = w.shape
    L = x.shape[-1]
    left = (k - 1) // 2
    xpad = np.zeros((c_in, L + k - 1))
    xpad[:, left:left + L] = x
    out = np.zeros((c_out, L))
    for o in range(c_out):
        for pos in range(L):
            s = float(b[o])
            for i in range(c_in):
                for t in range(k):
                    s += float(w[o, i, t]) * float(xpad[i, pos + t])
            out[o, pos] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2, dtype=np.float32)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_projector_zeroes_row(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        m = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(p, m).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_random_vs_triple_loop(self):
        rng = RngState(11)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        np.testing.assert_allclose(got, _matmul_oracle(a, b), atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_broadcast(self):
        rng = RngState(3)
        a = rng.uniform(-1, 1, (5, 3, 4)).astype(np.float32)
        w = rng.uniform(-1, 1, (4, 2)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(w))
        assert out.shape == (5, 3, 2)
        np.testing.assert_allclose(out.data[2], a[2] @ w, rtol=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_overflow_guard(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_matches_extended_precision_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        got = T.softmax(Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_positive(self, vals):
        out = T.softmax(Tensor(np.array(vals, dtype=np.float32))).data
        assert abs(out.sum() - 1.0) <= 1e-6
        assert (out > 0).all()


class TestLayerNorm:
    def test_constant_row_absorbed_by_eps(self):
        out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor([1.0, 1.0, 1.0]),
                           Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_symmetric_pair(self):
        eps = 1e-5
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps)
        a = 1.0 / np.sqrt(1.0 + eps)
        np.testing.assert_allclose(out.data, [a, -a], atol=1e-6)

    def test_recomputed_moments(self):
        rng = RngState(5)
        x = rng.uniform(-2, 2, (4, 16))
        out = T.layer_norm(Tensor(x, dtype=np.float64),
                           Tensor(np.ones(16), dtype=np.float64),
                           Tensor(np.zeros(16), dtype=np.float64)).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-6
        assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-4


class TestConv1d:
    def test_pointwise_scaling(self):
        out = T.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[2.0]]]), Tensor([0.0]))
        np.testing.assert_allclose(out.data, [[2.0, 4.0, 6.0]])

    def test_delta_kernel_identity(self):
        x = Tensor([[1.0, -2.0, 3.0, 0.5]])
        out = T.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_centered_delta_identity_any_odd_k(self, k):
        rng = RngState(k)
        x = rng.uniform(-1, 1, (2, 9)).astype(np.float32)
        w = np.zeros((2, 2, k), dtype=np.float32)
        for c in range(2):
            w[c, c, (k - 1) // 2] = 1.0
        out = T.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(2, dtype=np.float32)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_kernel_longer_than_input(self):
        rng = RngState(9)
        x = rng.uniform(-1, 1, (2, 3))
        w = rng.uniform(-1, 1, (3, 2, 5))
        b = rng.uniform(-1, 1, 3)
        out = T.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       Tensor(b, dtype=np.float64))
        assert out.shape == (3, 3)
        np.testing.assert_allclose(out.data, _conv1d_oracle(x, w, b), atol=1e-9)

    def test_batched_matches_single(self):
        rng = RngState(21)
        x = rng.uniform(-1, 1, (4, 3, 10)).astype(np.float32)
        w = rng.uniform(-1, 1, (5, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, 5).astype(np.float32)
        batched = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        single = T.conv1d(Tensor(x[1]), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(batched[1], single, rtol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv1d(Tensor(np.zeros((3, 5))), Tensor(np.zeros((2, 4, 3))))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_dropout_p0_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert T.dropout(x, 0.0, training=True, rng=RngState(0)) is x

    def test_dropout_inference_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert T.dropout(x, 0.5, training=False) is x

    def test_dropout_scales_survivors(self):
        rng = RngState(7)
        x = Tensor(np.ones(10000, dtype=np.float32))
        out = T.dropout(x, 0.25, training=True, rng=rng).data
        kept = out > 0
        np.testing.assert_allclose(out[kept], 1.0 / 0.75, rtol=1e-6)
        assert 0.70 < kept.mean() < 0.80

    def test_max_pool1d_full_length(self):
        x = Tensor([[1.0, 5.0, 2.0], [0.0, -1.0, -2.0]])
        np.testing.assert_allclose(T.max_pool1d(x).data, [5.0, 0.0])

    def test_concat_and_transpose(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0, 4.0]])
        out = T.concat([a, b], axis=0)
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.transpose(out).data, [[1, 3], [2, 4]])


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_sum_of_squares_grad(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_two_consumers_accumulate(self):
        # y = sum(x*a) + sum(x*b) must equal the sum of single-path grads
        rng = RngState(2)
        xv = rng.uniform(-1, 1, 5).astype(np.float32)
        a, b = 2.0, -3.0

        x = Tensor(xv, requires_grad=True)
        backward(T.add(T.tsum(T.scale(x, a)), T.tsum(T.scale(x, b))))
        joint = x.grad.copy()

        x1 = Tensor(xv, requires_grad=True)
        backward(T.tsum(T.scale(x1, a)))
        x2 = Tensor(xv, requires_grad=True)
        backward(T.tsum(T.scale(x2, b)))
        np.testing.assert_allclose(joint, x1.grad + x2.grad, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.mul(x, x))

    def test_accumulates_across_calls(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        backward(T.tsum(x))
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y.is_leaf() and not y.requires_grad


class TestGradCheck:
    """Per-primitive analytic gradients vs central differences (64-bit)."""

    def _check(self, f, shape, seed, tol=1e-6, low=-1.0, high=1.0):
        rng = RngState(seed)
        with T.use_dtype(np.float64):
            x = Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64)
            err = grad_check(f, x)
        assert err <= tol, f"grad_check error {err} > {tol}"

    def test_constant_function(self):
        with T.use_dtype(np.float64):
            x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
            err = grad_check(lambda t: Tensor(np.zeros(()), dtype=np.float64) + T.scale(T.tsum(t), 0.0), x)
        assert err == 0.0

    def test_sum_of_squares(self):
        self._check(lambda x: T.tsum(T.mul(x, x)), (7,), 1, tol=1e-7)

    def test_softmax_pick(self):
        w = np.zeros(5)
        w[2] = 1.0
        self._check(lambda x: T.tsum(T.mul(T.softmax(x), Tensor(w, dtype=np.float64))), (5,), 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_primitives_at_random_points(self, seed):
        # tolerance 1e-6 at 10 random points per primitive
        rng = RngState(seed)
        with T.use_dtype(np.float64):
            w = Tensor(rng.uniform(-1, 1, (4, 3)), dtype=np.float64)
            k = Tensor(rng.uniform(-1, 1, (2, 4, 3)), dtype=np.float64)
            b = Tensor(rng.uniform(-1, 1, 2), dtype=np.float64)
            g = Tensor(rng.uniform(0.5, 1.5, 6), dtype=np.float64)
            bb = Tensor(rng.uniform(-1, 1, 6), dtype=np.float64)
            cases = {
                "add": lambda x: T.tsum(T.add(x, w)),
                "sub": lambda x: T.tsum(T.sub(w, x)),
                "mul": lambda x: T.tsum(T.mul(x, w)),
                "div": lambda x: T.tsum(T.div(w, T.add(x, T.scale(x, 2.0)))),
                "matmul": lambda x: T.tsum(T.matmul(x, T.transpose(w))),
                "softmax": lambda x: T.tsum(T.square(T.softmax(x, axis=-1))),
                "layer_norm": lambda x: T.tsum(T.square(
                    T.layer_norm(T.reshape(x, (2, 6)), g, bb))),
                "conv1d": lambda x: T.tsum(T.square(T.conv1d(x, k, b))),
                "relu": lambda x: T.tsum(T.relu(x)),
                "exp": lambda x: T.tsum(T.exp(x)),
                "sqrt": lambda x: T.tsum(T.sqrt(T.add(T.square(x), T.scale(x, 0.0) + 1.0))),
                "softplus": lambda x: T.tsum(T.softplus(x)),
                "mean": lambda x: T.mean(T.square(x)),
                "max_pool1d": lambda x: T.tsum(T.max_pool1d(x)),
                "concat": lambda x: T.tsum(T.square(T.concat([x, T.scale(x, 2.0)], axis=-1))),
            }
            for name, f in cases.items():
                if name == "matmul":
                    shape = (2, 3)
                elif name in ("layer_norm", "concat"):
                    shape = (12,)
                elif name == "conv1d":
                    shape = (4, 5)
                else:
                    shape = (4, 3)
                x = Tensor(rng.uniform(0.3, 1.3, shape), requires_grad=True, dtype=np.float64)
                err = grad_check(f, x)
                assert err <= 1e-6, f"{name}: grad_check error {err}"

    def test_dropout_mask_gradient(self):
        with T.use_dtype(np.float64):
            x = Tensor(np.full(64, 2.0), requires_grad=True, dtype=np.float64)
            mask_rng_seed = 13
            # same mask each call: fresh RngState per evaluation
            f = lambda t: T.tsum(T.dropout(t, 0.5, training=True, rng=RngState(mask_rng_seed)))
            err = grad_check(f, x)
        assert err <= 1e-7


class TestRngState:
    def test_same_seed_same_stream(self):
        a = RngState(42).uniform(size=100)
        b = RngState(42).uniform(size=100)
        np.testing.assert_array_equal(a, b)

    def test_dropout_mask_reproducible(self):
        x = Tensor(np.ones(1000, dtype=np.float32))
        m1 = T.dropout(x, 0.5, training=True, rng=RngState(99)).data
        m2 = T.dropout(x, 0.5, training=True, rng=RngState(99)).data
        np.testing.assert_array_equal(m1, m2)

    def test_sampled_indices_reproducible(self):
        i1 = RngState(7).integers(0, 1000, size=50)
        i2 = RngState(7).integers(0, 1000, size=50)
        np.testing.assert_array_equal(i1, i2)

    def test_children_are_independent(self):
        r = RngState(5)
        a = r.child(0).uniform(size=10)
        b = r.child(1).uniform(size=10)
        assert not np.allclose(a, b)
        np.testing.assert_array_equal(a, RngState(5).child(0).uniform(size=10))

    def test_state_roundtrip(self):
        r = RngState(3)
        r.uniform(size=17)
        state = r.get_state()
        expect = r.uniform(size=5)
        r2 = RngState(3)
        r2.set_state(state)
        np.testing.assert_array_equal(r2.uniform(size=5), expect)


class TestDtypeMode:
    def test_use_dtype_switches_and_restores(self):
        assert T.default_dtype() is np.float32
        with T.use_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_finite_forward_on_finite_inputs(self):
        rng = RngState(8)
        x = Tensor(rng.uniform(-5, 5, (3, 8)).astype(np.float32))
        out = T.softmax(T.layer_norm(x, Tensor(np.ones(8, dtype=np.float32)),
                                     Tensor(np.zeros(8, dtype=np.float32))))
        assert np.isfinite(out.data).all()
        assert T.first_nonfinite(out) is None
