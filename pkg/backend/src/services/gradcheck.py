from __future__ import annotations

from typing import Callable, Collection

import numpy as np

from services.autograd import Tape, Tensor, no_tape


def check_gradients(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-5,
    exclude: Collection[int] = (),
    min_magnitude: float = 0.0,
) -> float:
    """
    用中心差分核对解析梯度。

    返回各坐标 |解析 - 数值| / (|解析| + |数值| + 1e-12) 的最大值。
    exclude 为需要跳过的扁平坐标（例如 relu 拐点）；|解析|+|数值|
    低于 min_magnitude 的坐标同样跳过。
    """
    if eps <= 0:
        raise ValueError(f"check_gradients: eps must be positive, got {eps}")

    x = Tensor(point.data, requires_grad=True)
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ValueError(f"check_gradients: f must be scalar-valued, got shape {list(y.shape)}")
        if not np.all(np.isfinite(y.data)):
            raise ValueError("check_gradients: f is not finite at the given point")
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    analytic = analytic.reshape(-1)

    base = point.data.astype(np.float64).reshape(-1)
    skipped = set(int(i) for i in exclude)
    worst = 0.0
    with no_tape():
        for i in range(base.size):
            if i in skipped:
                continue
            probe = base.copy()
            probe[i] = base[i] + eps
            f_plus = f(Tensor(probe.reshape(point.shape))).item()
            probe[i] = base[i] - eps
            f_minus = f(Tensor(probe.reshape(point.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            scale = abs(analytic[i]) + abs(numeric)
            if scale < min_magnitude:
                continue
            worst = max(worst, abs(analytic[i] - numeric) / (scale + 1e-12))
    return worst
