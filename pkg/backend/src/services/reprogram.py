"""
可学习填充 W 及其全部机制：两侧拼接、训练时随机裁剪、推理时 k 副本扩展与分数矩阵。
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np
from loguru import logger

from config import PaddingConfig, ScoreMode
from services.autograd import ShapeError, Tensor, as_tensor, concat, cosine_similarity, no_tape, reshape, stack

if TYPE_CHECKING:
    from services.networks import SpeakerModel


@dataclass
class PaddingParams:
    """
    填充参数：长度为 l 的向量 W，推理时等分为 k 段，每段长 n = l / k。
    l = 0 即不填充的基线。
    """
    values: Tensor
    num_segments: int = 1
    init_std: float = 1e-3

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ShapeError(f"padding values must be 1-D, got shape {list(self.values.shape)}")
        if self.num_segments < 1:
            raise ValueError(f"num_segments must be >= 1, got {self.num_segments}")
        if self.total_len % self.num_segments != 0:
            raise ValueError(
                f"padding length l={self.total_len} is not divisible by k={self.num_segments}"
            )

    @classmethod
    def create(
        cls,
        total_len: int,
        num_segments: int = 1,
        init_std: float = 1e-3,
        rng: Optional[np.random.Generator] = None,
    ) -> "PaddingParams":
        if total_len < 0:
            raise ValueError(f"padding length must be >= 0, got {total_len}")
        if num_segments < 1:
            raise ValueError(f"num_segments must be >= 1, got {num_segments}")
        if total_len % num_segments != 0:
            raise ValueError(f"padding length l={total_len} is not divisible by k={num_segments}")
        rng = rng or np.random.default_rng(0)
        values = Tensor(rng.normal(0.0, init_std, size=total_len), requires_grad=total_len > 0, name="padding.W")
        return cls(values=values, num_segments=num_segments, init_std=init_std)

    @classmethod
    def from_config(cls, cfg: PaddingConfig, rng: Optional[np.random.Generator] = None) -> "PaddingParams":
        return cls.create(cfg.l, cfg.k, cfg.init_std, rng)

    @property
    def total_len(self) -> int:
        return self.values.shape[0]

    @property
    def segment_len(self) -> int:
        return self.total_len // self.num_segments

    def segment(self, index: int) -> Tensor:
        if not 0 <= index < self.num_segments:
            raise IndexError(f"segment index {index} outside [0, {self.num_segments})")
        n = self.segment_len
        return self.values[index * n:(index + 1) * n]


@dataclass
class PaddedWaveform:
    """拼接后的波形及其左右填充长度；crop_offset 只在训练裁剪时存在。"""
    samples: Tensor
    source_len: int
    left_len: int
    right_len: int
    segment_index: Optional[int] = None
    crop_offset: Optional[int] = None

    @property
    def pad_len(self) -> int:
        return self.left_len + self.right_len


def pad_raw(x: Tensor, padding: Tensor) -> PaddedWaveform:
    """
    x̃ = [W[0:n//2], x, W[n//2:n]]；n = 0 时原样返回 x。
    """
    x, padding = as_tensor(x), as_tensor(padding)
    if x.ndim != 1 or padding.ndim != 1:
        raise ShapeError(f"pad_raw: expected 1-D operands, got {list(x.shape)} and {list(padding.shape)}")
    n = padding.shape[0]
    left = n // 2
    if n == 0:
        return PaddedWaveform(samples=x, source_len=x.shape[0], left_len=0, right_len=0)
    parts = [x, padding[left:]] if left == 0 else [padding[:left], x, padding[left:]]
    return PaddedWaveform(samples=concat(parts), source_len=x.shape[0], left_len=left, right_len=n - left)


def crop_and_pad_train(
    x: Tensor,
    params: PaddingParams,
    rng: np.random.Generator,
    offset: Optional[int] = None,
) -> PaddedWaveform:
    """
    从 W 中随机裁剪长为 n 的一段再按两侧拼接，梯度只落在被裁剪的切片上。
    k = 1 时整段 W 被使用，偏移恒为 0。
    """
    total, n = params.total_len, params.segment_len
    if total < 1:
        raise ValueError("crop_and_pad_train requires a padding length l >= 1")
    if offset is None:
        offset = 0 if total == n else int(rng.integers(0, total - n + 1))
    if not 0 <= offset <= total - n:
        raise ValueError(f"crop offset {offset} outside [0, {total - n}]")
    padded = pad_raw(x, params.values[offset:offset + n])
    padded.crop_offset = offset
    return padded


def expand_and_pad_infer(x: Tensor, params: PaddingParams) -> list[PaddedWaveform]:
    """推理时把 x 复制 k 份，第 i 份两侧拼接 W 的第 i 段。"""
    copies = []
    for i in range(params.num_segments):
        padded = pad_raw(x, params.segment(i))
        padded.segment_index = i
        copies.append(padded)
    return copies


def score_matrix(embs_x: Sequence[Tensor], embs_y: Sequence[Tensor]) -> Tensor:
    """
    S[i][j] = cos(embs_x[i], embs_y[j])，形状 [k, k]。
    """
    if len(embs_x) != len(embs_y) or not embs_x:
        raise ShapeError(f"score_matrix: need equal non-empty k, got {len(embs_x)} and {len(embs_y)}")
    k = len(embs_x)
    left = stack(list(embs_x))
    right = stack(list(embs_y))
    if left.ndim != 2 or left.shape != right.shape:
        raise ShapeError(f"score_matrix: incompatible shapes {list(left.shape)} and {list(right.shape)}")
    dim = left.shape[1]
    return cosine_similarity(reshape(left, (k, 1, dim)), reshape(right, (1, k, dim)), axis=-1)


def trial_score(scores: Tensor | np.ndarray, mode: ScoreMode | str = ScoreMode.MEAN_ALL) -> float:
    """
    mean_all 对 k² 个元素取平均；mean_offdiag 只平均 k² - k 个非对角元素。
    """
    mode = ScoreMode(mode)
    matrix = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
        raise ShapeError(f"trial_score: expected a square [k, k] matrix, got {list(matrix.shape)}")
    k = matrix.shape[0]
    if mode is ScoreMode.MEAN_ALL:
        return float(np.mean(matrix))
    if k < 2:
        raise ValueError("trial_score: mean_offdiag requires k >= 2")
    return float(np.mean(matrix[~np.eye(k, dtype=bool)]))


def padding_similarity_curve(
    model: "SpeakerModel",
    waveforms: Sequence[np.ndarray],
    pad_lengths: Iterable[int],
    rng: np.random.Generator,
    pad_std: float = 0.1,
) -> dict[int, float]:
    """
    对每个填充长度，用同一段随机填充拼接不同语句，返回两两余弦相似度的均值。
    填充越长、相同部分越占主导，不同语句的嵌入就越接近。
    """
    if len(waveforms) < 2:
        raise ValueError("padding_similarity_curve needs at least two waveforms")
    curve: dict[int, float] = {}
    with no_tape():
        for n in pad_lengths:
            shared = Tensor(rng.normal(0.0, pad_std, size=int(n)))
            embeddings = [model.embed(pad_raw(Tensor(w), shared).samples) for w in waveforms]
            sims = [
                cosine_similarity(embeddings[i], embeddings[j]).item()
                for i, j in combinations(range(len(embeddings)), 2)
            ]
            curve[int(n)] = float(np.mean(sims))
            logger.debug("Padding similarity n={} mean_cosine={:.4f}", n, curve[int(n)])
    return curve
