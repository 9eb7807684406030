import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fluoroformer import numerics as nx

GRAD_TOL = 1e-6
SEEDS = range(50)


@pytest.fixture(autouse=True)
def _float64():
    with nx.precision("float64"):
        yield


def _weights(shape, seed):
    # a fixed random weighting turns any tensor into a scalar with a generic gradient
    return nx.tensor(np.random.default_rng(10_000 + seed).standard_normal(shape))


def _scalarize(out, seed):
    return nx.sum_(nx.hadamard(out, _weights(out.shape, seed)))


# unary primitives: name -> (forward, input sampler)
UNARY = {
    "tanh": (nx.tanh, lambda r: r.standard_normal((3, 4))),
    "sigm": (nx.sigm, lambda r: 3 * r.standard_normal((3, 4))),
    "gelu": (nx.gelu, lambda r: 2 * r.standard_normal((3, 4))),
    "softmax": (lambda x: nx.softmax(x, axis=-1), lambda r: r.standard_normal((2, 5))),
    "softmax_axis0": (lambda x: nx.softmax(x, axis=0), lambda r: r.standard_normal((4, 3))),
    "scale": (lambda x: nx.scale(x, -2.5), lambda r: r.standard_normal((3,))),
    "transpose": (nx.transpose, lambda r: r.standard_normal((2, 3, 4))),
    "reshape": (lambda x: nx.reshape(x, (6, 2)), lambda r: r.standard_normal((3, 4))),
    "take": (lambda x: x[[0, 2, 0]], lambda r: r.standard_normal((3, 2))),
    "sum_axis": (lambda x: nx.sum_(x, axis=1), lambda r: r.standard_normal((3, 4))),
    "mean": (lambda x: nx.mean(x, axis=0, keepdims=True), lambda r: r.standard_normal((3, 4))),
    "log": (lambda x: nx.log(x, 1e-12), lambda r: r.uniform(0.2, 2.0, (5,))),
    "cumprod": (lambda x: nx.cumprod(x), lambda r: r.uniform(0.05, 0.95, (4,))),
    "norm_mean": (lambda x: nx.norm_stats(x)[0], lambda r: r.standard_normal((3, 5))),
    "norm_std": (lambda x: nx.norm_stats(x)[1], lambda r: r.standard_normal((3, 5))),
}

BINARY = {
    "matmul": (nx.matmul, (3, 4), (4, 2)),
    "batched_matmul": (nx.matmul, (2, 3, 4), (2, 4, 3)),
    "matmul_3d_2d": (nx.matmul, (2, 3, 4), (4, 5)),
    "hadamard": (nx.hadamard, (3, 4), (3, 4)),
    "add_broadcast": (nx.add, (3, 4), (4,)),
    "sub": (nx.sub, (2, 3), (2, 3)),
    "div": (nx.div, (2, 3), (2, 3)),
    "concat": (lambda a, b: nx.concat([a, b], axis=0), (2, 3), (1, 3)),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name, seed):
        fn, sample = UNARY[name]
        rng = np.random.default_rng(seed)
        x = nx.parameter(sample(rng), "x")
        errs = nx.gradcheck(lambda: _scalarize(fn(x), seed), [x])
        assert errs["x"] < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary(self, name, seed):
        fn, sa, sb = BINARY[name]
        rng = np.random.default_rng(seed)
        a = nx.parameter(rng.standard_normal(sa), "a")
        b_data = rng.standard_normal(sb)
        if name == "div":
            b_data = np.sign(b_data) * (np.abs(b_data) + 0.5)
        b = nx.parameter(b_data, "b")
        errs = nx.gradcheck(lambda: _scalarize(fn(a, b), seed), [a, b])
        assert max(errs.values()) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        x = nx.parameter(rng.standard_normal((2, 3, 5)), "x")
        w = nx.parameter(rng.standard_normal((4, 5)), "w")
        b = nx.parameter(rng.standard_normal(4), "b")
        errs = nx.gradcheck(lambda: _scalarize(nx.linear(x, w, b), seed), [x, w, b])
        assert max(errs.values()) < GRAD_TOL


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(nx.tensor(np.eye(2)), nx.tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        out = nx.matmul(nx.tensor([[1.0, 0.0]]), nx.tensor([[0.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))

    def test_rejects_vectors(self):
        with pytest.raises(nx.DimensionError):
            nx.matmul(nx.tensor(np.ones(3)), nx.tensor(np.ones(3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(nx.tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = nx.softmax(nx.tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0
        assert out[1] < 1e-300

    def test_empty_axis(self):
        with pytest.raises(nx.DimensionError):
            nx.softmax(nx.tensor(np.zeros((3, 0))), axis=-1)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-20, 20, allow_nan=False)))
    def test_rows_are_probability_vectors(self, x):
        s = nx.softmax(nx.tensor(x), axis=-1).data
        assert np.all(s > 0) and np.all(s < 1) or x.shape[1] == 1
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(-50, 50))
    def test_shift_invariance(self, x, c):
        np.testing.assert_allclose(nx.softmax(nx.tensor(x)).data, nx.softmax(nx.tensor(x + c)).data, atol=1e-12)


class TestElementwise:
    def test_sigm_zero(self):
        assert nx.elementwise("sigm", nx.tensor(0.0)).item() == 0.5

    def test_gelu_zero(self):
        assert nx.elementwise("gelu", nx.tensor(0.0)).item() == 0.0

    def test_hadamard(self):
        np.testing.assert_array_equal(nx.elementwise("hadamard", nx.tensor([1.0, 2.0]), nx.tensor([3.0, 4.0])).data, [3, 8])

    def test_add_sub_scale(self):
        a, b = nx.tensor([1.0, 2.0]), nx.tensor([0.5, -1.0])
        np.testing.assert_array_equal(nx.elementwise("add", a, b).data, [1.5, 1.0])
        np.testing.assert_array_equal(nx.elementwise("sub", a, b).data, [0.5, 3.0])
        np.testing.assert_array_equal(nx.elementwise("scale", a, 3.0).data, [3.0, 6.0])

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            nx.elementwise("relu", nx.tensor(1.0))

    def test_shape_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.hadamard(nx.tensor(np.ones(3)), nx.tensor(np.ones(4)))

    def test_gelu_is_exact_cdf_form(self):
        xs = np.linspace(-6, 6, 61)
        expected = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
        np.testing.assert_allclose(nx.gelu(nx.tensor(xs)).data, expected, rtol=1e-14, atol=1e-15)

    def test_sigm_extremes_are_finite(self):
        out = nx.sigm(nx.tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_tanh_matches_math(self):
        xs = np.linspace(-3, 3, 13)
        np.testing.assert_allclose(nx.tanh(nx.tensor(xs)).data, [math.tanh(x) for x in xs], rtol=1e-15)


class TestNormStats:
    def test_constant_slice(self):
        mu, sd = nx.norm_stats(nx.tensor([2.0, 2.0, 2.0, 2.0]), eps=1e-5)
        assert mu.item() == 2.0
        assert sd.item() == 1e-5

    def test_two_values(self):
        mu, sd = nx.norm_stats(nx.tensor([0.0, 2.0]), eps=1e-5)
        assert mu.item() == 1.0
        assert sd.item() == pytest.approx(1.0 + 1e-5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_pass_oracle(self, seed):
        x = np.random.default_rng(seed).standard_normal(16)
        m = math.fsum(x) / 16
        s = math.sqrt(math.fsum((v - m) ** 2 for v in x) / 16) + 1e-5
        mu, sd = nx.norm_stats(nx.tensor(x))
        assert abs(mu.item() - m) < 1e-12
        assert abs(sd.item() - s) < 1e-12

    def test_constant_slice_gradient_is_zero(self):
        x = nx.parameter(np.full(4, 3.0))
        nx.backward(nx.sum_(nx.norm_stats(x)[1]))
        np.testing.assert_array_equal(x.grad, np.zeros(4))


class TestBackward:
    @pytest.mark.parametrize("shape", [(1,), (3,), (2, 3), (2, 1, 4)])
    def test_sum_gives_ones(self, shape):
        x = nx.parameter(np.random.default_rng(0).standard_normal(shape))
        nx.backward(nx.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones(shape))

    def test_square(self):
        x = nx.parameter(3.0)
        (x * x).backward()
        assert x.grad == 6.0

    def test_non_scalar_loss(self):
        x = nx.parameter(np.ones(3))
        with pytest.raises(nx.GraphError):
            nx.backward(nx.tanh(x))

    def test_repeated_backward_raises(self):
        x = nx.parameter(np.ones(3))
        loss = nx.sum_(nx.tanh(x))
        nx.backward(loss)
        with pytest.raises(nx.GraphError):
            nx.backward(loss)

    def test_shared_input_accumulates(self):
        x = nx.parameter(np.array([1.0, -2.0]))
        y = nx.tanh(x)
        nx.backward(nx.sum_(nx.add(y, nx.hadamard(y, y))))
        t = np.tanh([1.0, -2.0])
        np.testing.assert_allclose(x.grad, (1 + 2 * t) * (1 - t ** 2), rtol=1e-14)

    def test_grad_shape_matches_data(self):
        rng = np.random.default_rng(1)
        w = nx.parameter(rng.standard_normal((4, 3)))
        b = nx.parameter(rng.standard_normal(4))
        nx.backward(nx.sum_(nx.linear(nx.tensor(rng.standard_normal((5, 3))), w, b)))
        assert w.grad.shape == w.shape and b.grad.shape == b.shape

    def test_no_grad_records_nothing(self):
        x = nx.parameter(np.ones(2))
        with nx.no_grad():
            y = nx.tanh(x)
        assert y.node is None and not y.requires_grad

    def test_constant_loss_rejected(self):
        with pytest.raises(nx.GraphError):
            nx.backward(nx.sum_(nx.tensor(np.ones(2))))


class TestFiniteness:
    def test_log_of_zero_without_floor(self):
        with pytest.raises(nx.NumericError):
            nx.log(nx.tensor([0.0]))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflowing_matmul(self):
        big = nx.tensor(np.full((1, 2), 1e308))
        with pytest.raises(nx.NumericError):
            nx.matmul(big, nx.tensor(np.full((2, 1), 10.0)))

    def test_log_floor_clamps(self):
        np.testing.assert_allclose(nx.log(nx.tensor([0.0]), 1e-12).data, [math.log(1e-12)])


class TestPrecision:
    def test_switch(self):
        with nx.precision("float32"):
            assert nx.tensor([1.0]).dtype == np.float32
        assert nx.tensor([1.0]).dtype == np.float64

    def test_ops_preserve_float32(self):
        with nx.precision("float32"):
            x = nx.tensor(np.ones((2, 3)))
            w = nx.tensor(np.ones((4, 3)))
            assert nx.gelu(nx.linear(x, w)).dtype == np.float32

    def test_unknown_precision(self):
        with pytest.raises(ValueError):
            nx.set_precision("float16x")

    def test_forward_is_bit_identical(self):
        rng = np.random.default_rng(7)
        x, w = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))

        def run():
            return nx.softmax(nx.gelu(nx.linear(nx.tensor(x), nx.tensor(w)))).data

        assert run().tobytes() == run().tobytes()


class TestGradcheckHarness:
    def test_detects_wrong_rule(self, monkeypatch):
        monkeypatch.setattr(nx, "_INV_SQRT_2PI", nx._INV_SQRT_2PI * 1.01)
        x = nx.parameter(np.random.default_rng(0).standard_normal(6), "x")
        assert nx.gradcheck(lambda: nx.sum_(nx.gelu(x)), [x])["x"] > 1e-4

    def test_relative_error_definition(self):
        assert nx.relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0
        assert nx.relative_error(np.zeros(2), np.zeros(2)) == 0.0
