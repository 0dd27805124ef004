from __future__ import annotations

from threading import Lock
from typing import Any, Literal, NoReturn

import numpy as np
from loguru import logger

from services.autograd import Tensor, no_tape
from services.features import fbank
from services.networks import SpeakerModel


class BlackBoxViolation(RuntimeError):
    """有代码试图对黑盒嵌入网络做反向传播。"""


class BlackBoxBackbone:
    """
    只暴露前向函数的嵌入网络 F。

    返回值是脱离磁带的常量张量，任何反向请求都会被计数并抛出
    BlackBoxViolation。梯度估计适配只能通过它访问 F。
    """

    def __init__(self, model: SpeakerModel) -> None:
        self._backbone = model.backbone
        self._fbank_cfg = model.fbank_cfg
        self._counts = {"forward": 0, "backward": 0}
        self._lock = Lock()

    @property
    def embedding_dim(self) -> int:
        return self._backbone.cfg.embedding_dim

    def forward(self, waveform: Tensor | np.ndarray) -> Tensor:
        """
        波形 [T] 或 [B, T] 到嵌入的纯前向调用。
        """
        data = waveform.data if isinstance(waveform, Tensor) else np.asarray(waveform, dtype=np.float64)
        with no_tape():
            embedding = self._backbone(fbank(Tensor(data), self._fbank_cfg))
        self._record("forward", data.shape)
        return Tensor(embedding.data, requires_grad=False, name="blackbox.embedding")

    __call__ = forward

    def backward(self, *args: Any, **kwargs: Any) -> NoReturn:
        self._record("backward", ())
        logger.error("Backward pass requested through the black-box backbone")
        raise BlackBoxViolation("the backbone is a black box: backward passes are not available")

    @property
    def forward_count(self) -> int:
        with self._lock:
            return self._counts["forward"]

    @property
    def backward_count(self) -> int:
        with self._lock:
            return self._counts["backward"]

    def reset(self) -> None:
        with self._lock:
            self._counts = {"forward": 0, "backward": 0}

    def as_dict(self) -> dict[str, Any]:
        """
        探针计数摘要，写入运行日志与清单。
        """
        with self._lock:
            return {
                "forward_count": self._counts["forward"],
                "backward_count": self._counts["backward"],
                "events": self._counts["forward"] + self._counts["backward"],
            }

    def _record(self, kind: Literal["forward", "backward"], shape: tuple[int, ...]) -> None:
        with self._lock:
            self._counts[kind] += 1
        logger.trace("Black-box probe: kind={} shape={}", kind, shape)
