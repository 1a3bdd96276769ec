import numpy as np
import pytest

from bpvae.errors import ShapeError
from bpvae.optim import AdamState, adam_step
from bpvae.tensor import Tensor


@pytest.fixture
def param():
    p = Tensor([1.0, -2.0], requires_grad=True, dtype=np.float64)
    p.grad = np.ones(2)
    return p


class TestAdam:
    def test_first_step_delta(self, param):
        """m_hat = v_hat = 1 on the first step, so the delta is -lr / (1 + eps)."""
        state = AdamState(learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8)
        adam_step({"w": param}, state)
        np.testing.assert_allclose(param.data - [1.0, -2.0], -1e-4 / (1 + 1e-8), rtol=1e-9)
        assert state.step_count == 1

    def test_zero_gradient_leaves_parameters(self, param):
        param.grad = np.zeros(2)
        adam_step({"w": param}, AdamState())
        np.testing.assert_array_equal(param.data, [1.0, -2.0])

    def test_two_identical_gradients_give_matching_deltas(self, param):
        state = AdamState()
        before = param.data.copy()
        adam_step({"w": param}, state)
        first = param.data - before
        before = param.data.copy()
        adam_step({"w": param}, state)
        second = param.data - before
        np.testing.assert_allclose(np.abs(second), np.abs(first), rtol=0.01)
        assert state.step_count == 2

    def test_gradients_untouched(self, param):
        adam_step({"w": param}, AdamState())
        np.testing.assert_array_equal(param.grad, [1.0, 1.0])

    def test_moments_match_parameter_shapes(self, param):
        state = AdamState()
        adam_step({"w": param}, state)
        assert state.first_moment["w"].shape == param.shape
        assert state.second_moment["w"].shape == param.shape

    def test_missing_gradient_names_parameter(self, param):
        other = Tensor([0.0], requires_grad=True)
        state = AdamState()
        with pytest.raises(ValueError, match="'decoder.bias'"):
            adam_step({"w": param, "decoder.bias": other}, state)
        assert state.step_count == 0

    def test_gradient_shape_mismatch(self, param):
        param.grad = np.ones(3)
        with pytest.raises(ShapeError):
            adam_step({"w": param}, AdamState())

    def test_float32_parameters_stay_float32(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        p.grad = np.full((2, 2), 0.5, dtype=np.float32)
        adam_step({"w": p}, AdamState(learning_rate=0.1))
        assert p.dtype == np.float32
        assert np.all(p.data < 1.0)
