"""
嵌入网络 F、分类头与梯度估计网络 G。
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import numpy as np

from config import BackboneConfig, EstimatorConfig, FbankConfig
from services.autograd import (
    ShapeError,
    Tensor,
    as_tensor,
    clamp_min,
    concat,
    conv1d,
    matmul,
    mean,
    relu,
    softmax,
    softmax_cross_entropy,
    sqrt,
    sum_,
    swapaxes,
    variance,
)
from services.features import fbank


class ParameterStore:
    """按名称保存参数张量，保持插入顺序。"""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool) -> Tensor:
        tensor = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise ValueError(f"missing parameters in state: {sorted(missing)}")
        for name, tensor in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"parameter {name}: expected shape {list(tensor.shape)}, found {list(value.shape)}")
            tensor.data = value.copy()
            tensor.grad = None

    def set_trainable(self, trainable: bool) -> None:
        for tensor in self._params.values():
            tensor.requires_grad = trainable
            tensor.grad = None


def _normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def statistics_pooling(h: Tensor) -> Tensor:
    """时间轴上的均值与标准差拼接。"""
    return concat([mean(h, axis=-2), sqrt(variance(h, axis=-2))], axis=-1)


def _check_features(features: Tensor, input_dim: int, min_frames: int, who: str) -> None:
    if features.ndim not in (2, 3) or features.shape[-1] != input_dim:
        raise ShapeError(f"{who}: expected features [..., frames, {input_dim}], got {list(features.shape)}")
    if features.shape[-2] < min_frames:
        raise ValueError(f"{who}: too few frames ({features.shape[-2]} < {min_frames})")


class Backbone(ParameterStore):
    """
    卷积块（时间卷积 + relu）→ 统计池化 → 线性投影。
    冻结后不会为其参数记录梯度，但梯度仍穿过它回到输入特征。
    """

    def __init__(self, cfg: BackboneConfig, input_dim: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.input_dim = input_dim
        rng = rng or np.random.default_rng(0)
        trainable = not cfg.frozen
        fan_in = input_dim
        for i in range(cfg.num_conv_blocks):
            std = math.sqrt(2.0 / (cfg.kernel_size * fan_in))
            self.add(f"conv{i}.weight", _normal(rng, (cfg.kernel_size, fan_in, cfg.channels), std), trainable)
            self.add(f"conv{i}.bias", np.zeros(cfg.channels), trainable)
            fan_in = cfg.channels
        self.add(
            "projection.weight",
            _normal(rng, (2 * cfg.channels, cfg.embedding_dim), math.sqrt(1.0 / (2 * cfg.channels))),
            trainable,
        )
        self.add("projection.bias", np.zeros(cfg.embedding_dim), trainable)

    @property
    def frozen(self) -> bool:
        return self.cfg.frozen

    def freeze(self) -> None:
        self.cfg = self.cfg.model_copy(update={"frozen": True})
        self.set_trainable(False)

    def forward(self, features: Tensor) -> Tensor:
        _check_features(features, self.input_dim, self.cfg.min_frames, "backbone_forward")
        h = features
        for i in range(self.cfg.num_conv_blocks):
            h = relu(conv1d(h, self[f"conv{i}.weight"], self[f"conv{i}.bias"]))
        pooled = statistics_pooling(h)
        return matmul(pooled, self["projection.weight"]) + self["projection.bias"]

    __call__ = forward


class Estimator(ParameterStore):
    """
    梯度估计网络 G：输入投影后，每块为
    [共享权重的单头自注意力（残差）→ 时间卷积 → relu]，再做统计池化与线性投影。
    """

    def __init__(
        self,
        cfg: EstimatorConfig,
        input_dim: int,
        embedding_dim: int,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.input_dim = input_dim
        self.embedding_dim = embedding_dim
        rng = rng or np.random.default_rng(0)
        c = cfg.channels
        self.add("stem.weight", _normal(rng, (input_dim, c), math.sqrt(2.0 / input_dim)), True)
        self.add("stem.bias", np.zeros(c), True)
        attention_sets = 1 if cfg.share_attention_weights else cfg.attention_blocks
        for j in range(min(attention_sets, cfg.attention_blocks)):
            for part in ("query", "key", "value"):
                self.add(f"attention{j}.{part}", _normal(rng, (c, c), math.sqrt(1.0 / c)), True)
        for i in range(cfg.attention_blocks):
            std = math.sqrt(2.0 / (cfg.kernel_size * c))
            self.add(f"block{i}.weight", _normal(rng, (cfg.kernel_size, c, c), std), True)
            self.add(f"block{i}.bias", np.zeros(c), True)
        self.add("projection.weight", _normal(rng, (2 * c, embedding_dim), math.sqrt(1.0 / (2 * c))), True)
        self.add("projection.bias", np.zeros(embedding_dim), True)

    def _attention(self, h: Tensor, block: int) -> Tensor:
        j = 0 if self.cfg.share_attention_weights else block
        q = matmul(h, self[f"attention{j}.query"])
        k = matmul(h, self[f"attention{j}.key"])
        v = matmul(h, self[f"attention{j}.value"])
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.cfg.channels))
        return h + matmul(softmax(scores, axis=-1), v)

    def forward(self, features: Tensor) -> Tensor:
        _check_features(features, self.input_dim, self.cfg.min_frames, "estimator_forward")
        h = matmul(features, self["stem.weight"]) + self["stem.bias"]
        for i in range(self.cfg.attention_blocks):
            h = self._attention(h, i)
            h = relu(conv1d(h, self[f"block{i}.weight"], self[f"block{i}.bias"]))
        pooled = statistics_pooling(h)
        return matmul(pooled, self["projection.weight"]) + self["projection.bias"]

    __call__ = forward


@dataclass
class ClassifierHead:
    """单层线性投影（无偏置），列数等于训练说话人数。"""
    projection: Tensor

    @classmethod
    def create(
        cls,
        embedding_dim: int,
        num_speakers: int,
        rng: np.random.Generator,
        trainable: bool = True,
    ) -> "ClassifierHead":
        weights = rng.normal(0.0, math.sqrt(1.0 / embedding_dim), size=(embedding_dim, num_speakers))
        return cls(projection=Tensor(weights, requires_grad=trainable, name="head.projection"))

    @property
    def num_speakers(self) -> int:
        return self.projection.shape[1]

    def frozen_copy(self) -> "ClassifierHead":
        return ClassifierHead(projection=self.projection.detach())


def l2_normalize(x: Tensor, axis: int) -> Tensor:
    return x / sqrt(sum_(x * x, axis=axis, keepdims=True))


def classify(embedding: Tensor, head: ClassifierHead) -> Tensor:
    """
    余弦 logits：L2 归一化的嵌入乘以 L2 归一化的列。
    """
    embedding = as_tensor(embedding)
    if embedding.shape[-1] != head.projection.shape[0]:
        raise ShapeError(
            f"classify: embedding shape {list(embedding.shape)} does not match head {list(head.projection.shape)}"
        )
    if np.any(np.sum(embedding.data * embedding.data, axis=-1) == 0):
        raise ValueError("classify: zero-norm embedding")
    return matmul(l2_normalize(embedding, -1), l2_normalize(head.projection, 0))


def aam_loss(logits: Tensor, labels: Any, margin: float, scale: float) -> Tensor:
    """
    AAM-Softmax：目标类 cos θ 替换为 cos(θ + m)，整体乘 s 后做交叉熵。
    θ + m > π 时退化为 cos θ - m·sin m，保证间隔不会降低损失。
    """
    logits = as_tensor(logits)
    if not 0.0 <= margin < math.pi / 2:
        raise ValueError(f"aam_loss: margin must lie in [0, pi/2), got {margin}")
    if scale <= 0:
        raise ValueError(f"aam_loss: scale must be positive, got {scale}")
    label_arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    num_classes = logits.shape[-1]
    if np.any(label_arr < 0) or np.any(label_arr >= num_classes):
        raise ValueError(f"aam_loss: label out of range [0, {num_classes})")

    onehot = np.zeros(logits.shape)
    if logits.ndim == 1:
        onehot[label_arr[0]] = 1.0
    else:
        onehot[np.arange(logits.shape[0]), label_arr] = 1.0

    target = sum_(logits * onehot, axis=-1, keepdims=True)
    sine = sqrt(clamp_min(1.0 - target * target, 0.0))
    shifted = target * math.cos(margin) - sine * math.sin(margin)
    fallback = target - math.sin(margin) * margin
    inside = (target.data > -math.cos(margin)).astype(np.float64)
    phi = shifted * inside + fallback * (1.0 - inside)
    adjusted = logits + onehot * (phi - target)
    return softmax_cross_entropy(adjusted * scale, label_arr if logits.ndim > 1 else label_arr[0])


@dataclass
class SpeakerModel:
    """
    冻结的嵌入网络 F、可训练分类头与可选的梯度估计网络 G。
    """
    backbone: Backbone
    fbank_cfg: FbankConfig
    head: Optional[ClassifierHead] = None
    estimator: Optional[Estimator] = None
    speakers: tuple[str, ...] = ()

    def embed(self, waveform: Tensor) -> Tensor:
        return self.backbone(fbank(waveform, self.fbank_cfg))
