import numpy as np
import pytest

from services.autograd import Tape, Tensor, sum_
from services.optim import AdamState, adam_step, learning_rate_at


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        # 第一步偏差校正后 m_hat / sqrt(v_hat) = sign(g)
        param = Tensor([1.0, -2.0], requires_grad=True)
        param.grad = np.array([0.5, -3.0])
        state = AdamState(learning_rate=0.1)
        adam_step([param], state)
        np.testing.assert_allclose(param.data, [0.9, -1.9], atol=1e-6)
        assert state.step == 1

    def test_weight_decay_is_coupled_into_gradient(self):
        param = Tensor([2.0], requires_grad=True)
        param.grad = np.array([0.0])
        state = AdamState(learning_rate=0.1, weight_decay=0.5)
        adam_step([param], state)
        np.testing.assert_allclose(param.data, [1.9], atol=1e-6)

    def test_missing_gradient_names_parameter(self):
        param = Tensor([1.0], requires_grad=True, name="padding.W")
        with pytest.raises(ValueError, match="padding.W"):
            adam_step([param], AdamState())

    def test_minimises_quadratic(self):
        param = Tensor([3.0, -4.0], requires_grad=True)
        state = AdamState(learning_rate=0.1)
        for _ in range(300):
            param.zero_grad()
            with Tape() as tape:
                loss = sum_(param * param)
            tape.backward(loss)
            adam_step([param], state)
        assert np.all(np.abs(param.data) < 0.2)


class TestLearningRateSchedule:
    @pytest.mark.parametrize(
        "epoch, expected",
        [(1, 1e-3), (10, 1e-3), (11, 1e-4), (15, 1e-4), (16, 1e-5), (20, 1e-5)],
    )
    def test_step_drops(self, epoch, expected):
        assert learning_rate_at(epoch, 1e-3, [10, 15], 10.0) == pytest.approx(expected)

    def test_small_data_schedule(self):
        rates = [learning_rate_at(e, 1e-3, [60, 80], 10.0) for e in (60, 61, 80, 81, 100)]
        assert rates == pytest.approx([1e-3, 1e-4, 1e-4, 1e-5, 1e-5])
