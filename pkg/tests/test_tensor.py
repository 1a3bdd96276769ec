import numpy as np
import pytest

from bpvae.errors import ShapeError, TapeError
from bpvae.tensor import (
    Tape,
    Tensor,
    backward,
    clamp,
    concat,
    conv2d,
    conv_transpose2d,
    exp,
    forward_op,
    leaky_relu,
    log,
    matmul,
    mean,
    reshape,
    sigmoid,
    slice_tensor,
    sum_,
    zero_grads,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _projected(op, rng):
    """Wrap ``op`` as a scalar loss: sum(op(*inputs) * fixed random weights)."""
    weights = {}

    def fn(*tensors):
        out = op(*tensors)
        if "w" not in weights:
            weights["w"] = rng.standard_normal(out.shape)
        return sum_(out * Tensor(weights["w"], dtype=np.float64))

    return fn


def check_gradients(fn, *arrays, h=1e-6, rtol=1e-4, atol=1e-6):
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape():
        loss = fn(*inputs)
    backward(loss)

    for t in inputs:
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            orig = t.data[idx]
            t.data[idx] = orig + h
            plus = fn(*inputs).item()
            t.data[idx] = orig - h
            minus = fn(*inputs).item()
            t.data[idx] = orig
            numeric[idx] = (plus - minus) / (2 * h)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)


def _away_from(rng, shape, point, gap):
    """Random values at least ``gap`` away from ``point`` on either side."""
    side = rng.choice([-1.0, 1.0], size=shape)
    return point + side * rng.uniform(gap, 1.0, size=shape)


def _clamp_inputs(rng, shape):
    """Values inside (-0.4, 0.4) or outside +-0.6, clear of the +-0.5 clamp bounds."""
    inner = rng.uniform(0.0, 0.4, size=shape)
    outer = rng.uniform(0.6, 1.0, size=shape)
    magnitude = np.where(rng.random(shape) < 0.5, inner, outer)
    return rng.choice([-1.0, 1.0], size=shape) * magnitude


GRADIENT_CASES = {
    "add": (lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "sub": (lambda a, b: a - b, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "mul": (lambda a, b: a * b, lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal((3, 1))]),
    "matmul": (matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "leaky_relu": (lambda x: leaky_relu(x, 0.1), lambda r: [_away_from(r, (4, 4), 0.0, 0.05)]),
    "sigmoid": (sigmoid, lambda r: [r.standard_normal((3, 5))]),
    "exp": (exp, lambda r: [r.uniform(-1, 1, (4, 3))]),
    "log": (log, lambda r: [r.uniform(0.5, 2.0, (4, 3))]),
    "clamp": (lambda x: clamp(x, -0.5, 0.5), lambda r: [_clamp_inputs(r, (4, 4))]),
    "sum_axis": (lambda x: sum_(x, axis=1), lambda r: [r.standard_normal((3, 4, 2))]),
    "mean_keepdims": (lambda x: mean(x, axis=(0, 2), keepdims=True), lambda r: [r.standard_normal((3, 4, 2))]),
    "reshape": (lambda x: reshape(x, (6, 2)) * reshape(x, (6, 2)), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "slice": (lambda x: slice_tensor(x, (slice(None), slice(1, 3))) * 2.0, lambda r: [r.standard_normal((3, 4))]),
    "conv2d_same_s2": (
        lambda x, w: conv2d(x, w, 2, "same"),
        lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3))],
    ),
    "conv2d_valid_s1": (
        lambda x, w: conv2d(x, w, 1, "valid"),
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.standard_normal((2, 2, 2, 2))],
    ),
    "conv_transpose2d_same_s2": (
        lambda x, w: conv_transpose2d(x, w, 2, "same", (6, 6)),
        lambda r: [r.standard_normal((2, 3, 3, 3)), r.standard_normal((3, 2, 4, 4))],
    ),
    "conv_transpose2d_valid_s1": (
        lambda x, w: conv_transpose2d(x, w, 1, "valid"),
        lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((2, 1, 2, 2))],
    ),
}


class TestTensorOps:
    def test_leaky_relu_definition(self):
        """Negative inputs are scaled by the slope."""
        out = leaky_relu(Tensor([-1.0, 2.0]), slope=0.1)
        np.testing.assert_allclose(out.data, [-0.1, 2.0], rtol=1e-6)

    def test_matmul_ones(self):
        out = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        assert out.shape == (2, 2)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_conv2d_matches_sliding_window_oracle(self, rng):
        """Stride-1 valid conv2d equals direct window sums."""
        x = rng.standard_normal((1, 1, 3, 3))
        k = rng.standard_normal((1, 1, 2, 2))
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=1, padding="valid")

        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                expected[i, j] = np.sum(x[0, 0, i : i + 2, j : j + 2] * k[0, 0])
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-12)

    def test_conv2d_same_stride2_shape(self):
        out = conv2d(Tensor(np.zeros((2, 1, 32, 32))), Tensor(np.zeros((8, 1, 4, 4))), 2, "same")
        assert out.shape == (2, 8, 16, 16)

    def test_conv_transpose_is_adjoint_of_conv(self, rng):
        """<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>."""
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 4, 4))
        y = rng.standard_normal((2, 4, 4, 4))
        forward = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), 2, "same").data
        adjoint = conv_transpose2d(Tensor(y, dtype=np.float64), Tensor(w, dtype=np.float64), 2, "same", (8, 8)).data
        assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-10)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))
        with pytest.raises(ShapeError, match="matmul"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_conv_rejects_unsupported_stride_and_padding(self):
        x, w = Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="stride"):
            conv2d(x, w, stride=3)
        with pytest.raises(ValueError, match="padding"):
            conv2d(x, w, padding="full")
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))

    def test_log_clamps_non_positive_inputs(self):
        x = Tensor([0.0, -1.0, 1.0], requires_grad=True, dtype=np.float64)
        with Tape():
            y = sum_(log(x))
        backward(y)
        assert y.item() == pytest.approx(2 * np.log(1e-7))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_forward_op_dispatch(self):
        out = forward_op("leaky_relu", Tensor([-2.0]), slope=0.5)
        assert out.data[0] == pytest.approx(-1.0)
        out = forward_op("concat", Tensor([1.0]), Tensor([2.0]), axis=0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])
        with pytest.raises(ValueError, match="Unknown op kind"):
            forward_op("softmax", Tensor([1.0]))

    def test_dtype_is_preserved(self):
        x32 = Tensor(np.ones(3))
        x64 = Tensor(np.ones(3), dtype=np.float64)
        assert (x32 * 2.0).dtype == np.float32
        assert sigmoid(x64).dtype == np.float64

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(2)).item()


class TestTape:
    def test_square_gradient(self):
        """d(x*x)/dx at 3 is 6."""
        x = Tensor(3.0, requires_grad=True)
        with Tape():
            y = x * x
        backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        with Tape():
            y = sigmoid(x)
        y.backward()
        assert x.grad == pytest.approx(0.25)

    def test_backward_accumulates_until_reset(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape():
            y = x * x
        backward(y)
        backward(y)
        assert x.grad == pytest.approx(12.0)
        zero_grads([x])
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            backward(y)

    def test_loss_without_tape_rejected(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        assert not y.requires_grad
        with pytest.raises(TapeError):
            backward(y)

    def test_nodes_recorded_in_execution_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = sum_(exp(x * 2.0))
        assert [node.op for node in tape.nodes] == ["mul", "exp", "sum"]
        assert tape.nodes[-1].output is y

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            Tensor(np.ones(2)) + Tensor(np.ones(2))
        assert len(tape) == 0

    def test_matmul_mean_network_matches_finite_differences(self, rng):
        """Random 4x4 matmul + mean network, float64 central differences."""
        w1 = rng.standard_normal((4, 4))
        w2 = rng.standard_normal((4, 4))
        x = rng.standard_normal((4, 4))
        check_gradients(lambda a, b, c: mean(sigmoid(matmul(matmul(a, b), c))), x, w1, w2)

    @pytest.mark.parametrize("case", sorted(GRADIENT_CASES))
    @pytest.mark.parametrize("trial", range(6))
    def test_op_gradients_match_finite_differences(self, case, trial):
        op, make_inputs = GRADIENT_CASES[case]
        r = np.random.default_rng([trial, len(case)])
        check_gradients(_projected(op, r), *make_inputs(r))

    def test_linearity(self, rng):
        """grad(a*f + b*g) == a*grad(f) + b*grad(g)."""
        data = rng.standard_normal((3, 3))

        def grad_of(build):
            x = Tensor(data, requires_grad=True, dtype=np.float64)
            with Tape():
                loss = build(x)
            backward(loss)
            return x.grad

        f = lambda x: sum_(sigmoid(x))  # noqa: E731
        g = lambda x: mean(x * x)  # noqa: E731
        combined = grad_of(lambda x: f(x) * 2.5 + g(x) * -0.75)
        np.testing.assert_allclose(combined, 2.5 * grad_of(f) - 0.75 * grad_of(g), atol=1e-6)

    def test_determinism(self, rng):
        x_data = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
        w_data = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)

        def run():
            x = Tensor(x_data, requires_grad=True)
            w = Tensor(w_data, requires_grad=True)
            with Tape():
                loss = mean(leaky_relu(conv2d(x, w, 1, "same")))
            backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        assert first[0] == second[0]
        np.testing.assert_array_equal(first[1], second[1])
        np.testing.assert_array_equal(first[2], second[2])

    def test_reshape_round_trip(self, rng):
        t = Tensor(rng.standard_normal((2, 3, 4)))
        back = reshape(reshape(t, (6, 4)), (2, 3, 4))
        np.testing.assert_array_equal(back.data, t.data)
        with pytest.raises(ShapeError):
            reshape(t, (5, 5))
