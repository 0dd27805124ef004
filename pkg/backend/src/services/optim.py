from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.autograd import Tensor


@dataclass
class AdamState:
    """
    Adam 优化器状态：每个参数的一阶/二阶矩缓冲与步数计数。
    """
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """
    执行一次 Adam 更新，权重衰减以 L2 方式耦合进梯度。
    """
    for index, param in enumerate(params):
        if param.grad is None:
            label = param.name or f"#{index}"
            raise ValueError(f"adam_step: parameter {label} has no gradient")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for param in params:
        key = id(param)
        grad = param.grad + state.weight_decay * param.data
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None or m.shape != param.shape:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[key] = m
        state.second_moment[key] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def learning_rate_at(epoch: int, base_lr: float, drop_epochs: Sequence[int], drop_factor: float) -> float:
    """
    阶梯学习率：epoch 从 1 开始，每越过一个下降点除以 drop_factor。
    """
    drops = sum(1 for boundary in drop_epochs if epoch > boundary)
    return base_lr / (drop_factor**drops)
