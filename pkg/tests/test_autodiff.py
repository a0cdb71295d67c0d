import threading

import numpy as np
import pytest

from punet import autodiff as ad
from punet.autodiff import ShapeError, Tensor
from punet.params import ParamStore, finite_difference_check

from conftest import projection_loss


def gradcheck(fn, shapes, seed, positive=False, n_coords=None):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i, s in enumerate(shapes):
        v = rng.normal(size=s)
        store.add(f"x{i}", np.abs(v) + 0.5 if positive else v)
    xs = [store[f"x{i}"] for i in range(len(shapes))]
    return finite_difference_check(lambda: projection_loss(fn(*xs), seed), store, n_coords=n_coords)


PRIMITIVES = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)], False),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)], False),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)], True),
    "power": (lambda a: ad.power(a, 1.7), [(5,)], True),
    "exp": (lambda a: ad.exp(a), [(2, 3)], False),
    "log": (lambda a: ad.log(a), [(2, 3)], True),
    "sqrt": (lambda a: ad.sqrt(a), [(4,)], True),
    "tanh": (lambda a: ad.tanh(a), [(3, 3)], False),
    "sigmoid": (lambda a: ad.sigmoid(a), [(3, 3)], False),
    "silu": (lambda a: ad.silu(a), [(3, 3)], False),
    "glu": (lambda a: ad.glu(a, axis=-1), [(2, 3, 6)], False),
    "sum_axis": (lambda a: ad.tsum(a, axis=1, keepdims=True), [(3, 4, 2)], False),
    "mean": (lambda a: ad.mean(a, axis=0), [(3, 4)], False),
    "reshape_transpose": (lambda a: a.reshape(4, 6).transpose(1, 0), [(2, 3, 4)], False),
    "getitem_slice": (lambda a: a[:, 1:3], [(3, 5)], False),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 0])], [(3, 2)], False),
    "take": (lambda w: ad.take(w, np.array([[0, 2], [2, 1]])), [(3, 4)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)], False),
    "pad_axis": (lambda a: ad.pad_axis(a, 1, 2, axis=1), [(2, 3, 2)], False),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)], False),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)], False),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 5)], False),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [(3, 5)], False),
    "where": (lambda a: ad.where(np.array([True, False, True]), a, -3.0), [(2, 3)], False),
    "depthwise_conv1d": (lambda x, w, b: ad.depthwise_conv1d(x, w, b), [(2, 6, 3), (3, 5), (3,)], False),
    "conv1d_strided": (lambda x, w, b: ad.conv1d(x, w, b, stride=2, padding=1), [(2, 7, 3), (4, 3, 3), (4,)],
                       False),
    "rel_shift": (lambda a: ad.rel_shift(a), [(2, 4, 7)], False),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_fifty_random_instances(self, name):
        fn, shapes, positive = PRIMITIVES[name]
        worst = max(gradcheck(fn, shapes, seed, positive) for seed in range(50))
        assert worst < 1e-4, f"{name}: {worst}"

    def test_two_layer_ffn_below_1e6(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        store.add("x", rng.normal(size=(4, 5)))
        store.add("w1", rng.normal(size=(7, 5)))
        store.add("b1", rng.normal(size=7))
        store.add("w2", rng.normal(size=(3, 7)))

        def f():
            h = ad.silu(ad.linear(store["x"], store["w1"], store["b1"]))
            return (ad.linear(h, store["w2"]) ** 2).sum()

        assert finite_difference_check(f, store, n_coords=None) < 1e-6

    def test_quadratic_form_below_1e9(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(6, 6))
        store = ParamStore()
        store.add("x", rng.normal(size=(6, 1)))

        def f():
            x = store["x"]
            return (x.transpose(1, 0) @ (Tensor(A) @ x)).sum()

        assert finite_difference_check(f, store, n_coords=None) < 1e-9


class TestForwardValues:
    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))

    def test_layer_norm_of_constant_is_zero(self):
        out = ad.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_matmul_of_ones(self):
        out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 2)))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_log_softmax_normalised(self, rng):
        out = ad.log_softmax(Tensor(rng.normal(size=(4, 9)) * 30))
        np.testing.assert_allclose(ad.logsumexp_np(out.data, axis=-1), 0.0, atol=1e-12)

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_rel_shift_reads_distance(self):
        T = 4
        table = np.tile(np.arange(T - 1, -T, -1, dtype=float), (T, 1))  # column r holds distance T-1-r
        out = ad.rel_shift(Tensor(table)).data
        i, j = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
        np.testing.assert_array_equal(out, i - j)

    def test_conv1d_matches_direct_loop(self, rng):
        x = rng.normal(size=(1, 9, 2))
        w = rng.normal(size=(3, 2, 3))
        b = rng.normal(size=3)
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x[0], ((1, 1), (0, 0)))
        ref = np.array([[(xp[2 * t:2 * t + 3] * w[o].T).sum() + b[o] for o in range(3)] for t in range(5)])
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_depthwise_conv_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 5, 3))
        w = np.zeros((3, 5))
        w[:, 2] = 1.0
        out = ad.depthwise_conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(out, x)


class TestBackward:
    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_softmax_has_zero_grad(self, rng):
        x = Tensor(rng.normal(size=6), requires_grad=True)
        ad.backward(ad.softmax(x).sum())
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_unreached_params_get_zero_grad(self):
        store = ParamStore()
        a = store.add("a", np.ones(2))
        store.add("b", np.ones(3))
        ad.backward((a * 2.0).sum(), store)
        np.testing.assert_array_equal(store["b"].grad, np.zeros(3))
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])

    def test_repeated_backward_is_identical(self, rng):
        store = ParamStore()
        w = store.add("w", rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(5, 3)))

        def run():
            store.zero_grad()
            ad.backward(ad.log_softmax(ad.linear(x, w)).sum(), store)
            return w.grad.copy()

        np.testing.assert_array_equal(run(), run())

    def test_concat_backward_splits_upstream(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        up = rng.normal(size=(2, 7))
        ad.backward((ad.concat([a, b], axis=-1) * up).sum())
        np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=-1), up)

    def test_shared_node_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        ad.backward(y + y)
        assert x.grad == pytest.approx(8.0)

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        ad.backward(y)
        assert x.grad == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = ad.grad_enabled()

        with ad.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True


class TestErrors:
    def test_matmul_shape_error_names_primitive(self):
        with pytest.raises(ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_linear_shape_error(self):
        with pytest.raises(ShapeError, match="linear"):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_even_depthwise_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.depthwise_conv1d(Tensor(np.ones((1, 4, 2))), Tensor(np.ones((2, 4))))

    def test_debug_mode_flags_non_finite(self, debug_mode):
        with pytest.raises(FloatingPointError, match="log"), np.errstate(divide="ignore"):
            ad.log(Tensor(np.array([0.0, 1.0])))

    def test_fd_check_rejects_nondeterministic(self):
        store = ParamStore()
        store.add("x", np.ones(2))
        draws = iter(np.arange(10.0))
        with pytest.raises(ValueError, match="deterministic"):
            finite_difference_check(lambda: (store["x"] * next(draws)).sum(), store)


class TestPrecision:
    def test_float32_is_preserved(self, rng):
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        out = ad.silu(ad.linear(x, w))
        assert out.dtype == np.float32
        ad.backward(out.sum())
        assert w.grad.dtype == np.float32

    def test_default_is_double(self):
        assert Tensor([1, 2, 3]).dtype == np.float64
