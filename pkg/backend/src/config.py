import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator

from model import DomainSpec

TOOL_VERSION = "0.1.0"
ENV_PREFIX = "REPROG_"
NESTED_DELIMITER = "__"


class RunMode(Enum):
    """
    运行模式枚举类
    """
    PRETRAIN = "pretrain"
    ADAPT_VANILLA = "adapt_vanilla"
    ADAPT_GRAD_EST = "adapt_grad_est"
    EVAL = "eval"
    SWEEP = "sweep"


class ScoreMode(Enum):
    """
    分数矩阵归约方式
    """
    MEAN_ALL = "mean_all"
    MEAN_OFFDIAG = "mean_offdiag"


class PaddingConfig(BaseModel):
    """可学习填充 W 的尺寸。"""
    l: int = Field(default=3200, ge=0, title="Total Length", description="W 的总长度 l")
    k: int = Field(default=1, ge=1, title="Segments", description="推理时的副本数 k，n = l / k")
    init_std: float = Field(default=1e-3, gt=0, title="Init Std", description="W 的高斯初始化标准差")

    @model_validator(mode="after")
    def _check_divisible(self) -> "PaddingConfig":
        if self.l % self.k != 0:
            raise ValueError(f"padding length l={self.l} is not divisible by k={self.k}")
        return self

    @property
    def n(self) -> int:
        return self.l // self.k


class AamConfig(BaseModel):
    """AAM-Softmax 超参数。"""
    m: float = Field(default=0.2, ge=0, lt=1.5707963267948966, title="Margin", description="角度间隔 m（弧度）")
    s: float = Field(default=30.0, gt=0, title="Scale", description="logit 缩放 s")


class FbankConfig(BaseModel):
    """
    对数 Mel 滤波器组特征参数。
    """
    sample_rate_hz: int = Field(default=16000, gt=0, title="Sample Rate", description="采样率")
    num_mels: int = Field(default=64, ge=1, title="Mel Bins", description="Mel 滤波器个数")
    frame_length_ms: float = Field(default=25.0, gt=0, title="Frame Length", description="帧长（毫秒）")
    frame_shift_ms: float = Field(default=10.0, gt=0, title="Frame Shift", description="帧移（毫秒）")
    fft_size: int = Field(default=512, gt=0, title="FFT Size", description="DFT 点数")
    fmin_hz: float = Field(default=20.0, ge=0, title="Min Frequency", description="最低频率")
    fmax_hz: Optional[float] = Field(default=None, title="Max Frequency", description="最高频率，默认为采样率一半")
    log_floor: float = Field(default=1e-10, gt=0, title="Log Floor", description="取对数前的能量下限")

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _check_geometry(self) -> "FbankConfig":
        if self.fft_size < self.frame_samples:
            raise ValueError(f"fft_size {self.fft_size} is smaller than frame length {self.frame_samples} samples")
        if self.shift_samples < 1:
            raise ValueError("frame shift must be at least one sample")
        nyquist = self.sample_rate_hz / 2
        if not 0 <= self.fmin_hz < self.upper_hz <= nyquist:
            raise ValueError(
                f"degenerate mel band: need 0 <= fmin < fmax <= {nyquist}, got fmin={self.fmin_hz} fmax={self.upper_hz}"
            )
        return self

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.frame_length_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.frame_shift_ms / 1000.0))

    @property
    def upper_hz(self) -> float:
        return self.sample_rate_hz / 2 if self.fmax_hz is None else self.fmax_hz


class BackboneConfig(BaseModel):
    """冻结的说话人嵌入提取网络 F。"""
    num_conv_blocks: int = Field(default=3, ge=1, title="Conv Blocks", description="卷积块个数")
    channels: int = Field(default=32, ge=1, title="Channels", description="卷积通道数")
    kernel_size: int = Field(default=5, ge=1, title="Kernel Size", description="时间卷积核大小")
    embedding_dim: int = Field(default=64, ge=2, title="Embedding Dim", description="嵌入维度")
    frozen: bool = Field(default=False, title="Frozen", description="是否冻结参数")

    @property
    def min_frames(self) -> int:
        return self.num_conv_blocks * (self.kernel_size - 1) + 1


class EstimatorConfig(BaseModel):
    """梯度估计网络 G。"""
    channels: int = Field(default=32, ge=1, title="Channels", description="通道数 C")
    attention_blocks: int = Field(default=3, ge=0, title="Attention Blocks", description="自注意力块个数")
    share_attention_weights: bool = Field(default=True, title="Share Attention", description="各注意力块是否共享权重")
    kernel_size: int = Field(default=3, ge=1, title="Kernel Size", description="块内卷积核大小")

    @property
    def min_frames(self) -> int:
        return max(1, self.attention_blocks * (self.kernel_size - 1) + 1)


def _source_domain() -> DomainSpec:
    return DomainSpec(
        domain_id="source",
        f0_contour="declination",
        contour_depth=(0.05, 0.15),
        duration_s=(2.5, 4.0),
        noise_snr_db=(25.0, 35.0),
        spectral_tilt_db_per_octave=-3.0,
    )


def _target_domain() -> DomainSpec:
    return DomainSpec(
        domain_id="target",
        f0_contour="tonal",
        contour_depth=(0.15, 0.35),
        duration_s=(2.2, 3.5),
        noise_snr_db=(12.0, 20.0),
        spectral_tilt_db_per_octave=-9.0,
    )


class DataConfig(BaseModel):
    """
    合成跨域语料与试验列表的规模。
    """
    num_source_speakers: int = Field(default=20, ge=2, title="Source Speakers", description="源域预训练说话人数")
    num_source_eval_speakers: int = Field(default=10, ge=2, title="Source Eval Speakers", description="源域留出评测说话人数")
    num_target_speakers: int = Field(default=20, ge=2, title="Target Speakers", description="目标域适配说话人数")
    num_target_eval_speakers: int = Field(default=10, ge=2, title="Target Eval Speakers", description="目标域评测说话人数")
    utts_per_speaker: tuple[int, int] = Field(default=(10, 20), title="Utterances", description="每个说话人的语句数范围")
    eval_utts_per_speaker: tuple[int, int] = Field(default=(15, 20), title="Eval Utterances", description="评测说话人的语句数范围")
    num_target_trials: int = Field(default=1000, ge=1, title="Target Trials", description="同说话人试验数")
    num_nontarget_trials: int = Field(default=1000, ge=1, title="Nontarget Trials", description="异说话人试验数")
    source_domain: DomainSpec = Field(default_factory=_source_domain, title="Source Domain", description="源域参数")
    target_domain: DomainSpec = Field(default_factory=_target_domain, title="Target Domain", description="目标域参数")

    @field_validator("utts_per_speaker", "eval_utts_per_speaker")
    @classmethod
    def _check_range(cls, value: tuple[int, int]) -> tuple[int, int]:
        low, high = value
        if low < 1 or high < low:
            raise ValueError(f"invalid utterance range {value}")
        return value


def _wrap_scalar(value: Any) -> Any:
    """单个值写成一元列表，`K_VALUES=1` 与 `K_VALUES=1,2` 同样可用。"""
    if isinstance(value, (int, float, str)) and not isinstance(value, bool):
        return [value]
    return value


class SweepConfig(BaseModel):
    """填充长度网格。"""
    n_values: list[int] = Field(default_factory=lambda: [0, 3200, 6400], title="n Values", description="每个副本的填充长度 n")
    k_values: list[int] = Field(default_factory=lambda: [1], title="k Values", description="副本数 k")
    repeats: int = Field(default=1, ge=1, title="Repeats", description="每个格点的随机种子数")
    workers: int = Field(default=1, ge=1, title="Workers", description="并行进程数")
    small_data_speakers: list[int] = Field(
        default_factory=lambda: [20, 50, 100], title="Small-data Speakers", description="小数据协议的说话人数"
    )
    small_data_utts: tuple[int, int] = Field(default=(20, 50), title="Small-data Utterances", description="小数据协议每人语句数")
    small_data_repeats: int = Field(default=5, ge=1, title="Small-data Repeats", description="小数据协议重复次数")

    @field_validator("n_values", "k_values", "small_data_speakers", mode="before")
    @classmethod
    def _wrap_lists(cls, value: Any) -> Any:
        return _wrap_scalar(value)

    @field_validator("n_values")
    @classmethod
    def _check_n(cls, value: list[int]) -> list[int]:
        if not value or any(n < 0 for n in value):
            raise ValueError(f"n_values must be non-empty and non-negative, got {value}")
        return value

    @field_validator("k_values")
    @classmethod
    def _check_k(cls, value: list[int]) -> list[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError(f"k_values must be non-empty and >= 1, got {value}")
        return value


class ExperimentConfig(BaseModel):
    """
    实验配方，完整快照写入运行清单以便复现。
    """
    mode: RunMode = Field(default=RunMode.EVAL, title="Mode", description="运行模式")
    padding: PaddingConfig = Field(default_factory=PaddingConfig, title="Padding", description="填充参数 l, k")
    crop_seconds: float = Field(default=2.0, gt=0, title="Crop Seconds", description="训练时随机裁剪长度（秒）")
    batch_size: int = Field(default=32, ge=1, title="Batch Size", description="批大小")
    epochs: int = Field(default=20, ge=1, title="Epochs", description="训练轮数")
    lr: float = Field(default=1e-3, gt=0, title="Learning Rate", description="初始学习率")
    lr_drop_epochs: list[int] = Field(default_factory=lambda: [10, 15], title="LR Drops", description="学习率下降的轮次")
    lr_drop_factor: float = Field(default=10.0, gt=0, title="LR Drop Factor", description="每次下降的倍数")
    weight_decay: float = Field(default=1e-4, ge=0, title="Weight Decay", description="L2 权重衰减")
    aam: AamConfig = Field(default_factory=AamConfig, title="AAM", description="AAM-Softmax 超参数")
    small_data_mode: bool = Field(default=False, title="Small Data", description="小数据协议：100 轮，60/80 下降，去掉分类投影")
    seed: int = Field(..., title="Seed", description="本次运行全部随机性的唯一来源")
    score_mode: ScoreMode = Field(default=ScoreMode.MEAN_ALL, title="Score Mode", description="分数矩阵的平均方式")
    fbank: FbankConfig = Field(default_factory=FbankConfig, title="FBank", description="特征前端")
    backbone: BackboneConfig = Field(default_factory=BackboneConfig, title="Backbone", description="嵌入网络 F")
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig, title="Estimator", description="梯度估计网络 G")
    data: DataConfig = Field(default_factory=DataConfig, title="Data", description="语料规模")
    sweep: SweepConfig = Field(default_factory=SweepConfig, title="Sweep", description="扫描网格")
    eval_workers: int = Field(default=1, ge=1, title="Eval Workers", description="评测时提取嵌入的线程数")

    @field_validator("lr_drop_epochs", mode="before")
    @classmethod
    def _wrap_drops(cls, value: Any) -> Any:
        return _wrap_scalar(value)

    @model_validator(mode="after")
    def _apply_schedule(self) -> "ExperimentConfig":
        if self.small_data_mode:
            self.epochs = 100
            self.lr_drop_epochs = [60, 80]
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and drops[-1] >= self.epochs:
            raise ValueError(f"lr_drop_epochs {drops} must all be < epochs={self.epochs}")
        return self

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * self.fbank.sample_rate_hz))

    @classmethod
    def from_sources(
        cls,
        config_path: Optional[str | Path] = None,
        overrides: Optional[dict[str, Any]] = None,
    ) -> "ExperimentConfig":
        """
        依次合并配置文件、REPROG_ 环境变量与命令行覆盖项。
        """
        raw_values: dict[str, Any] = {}

        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            for key, value in dotenv_values(path).items():
                if value is not None:
                    _assign(raw_values, key, value)

        for key, value in os.environ.items():
            if key.startswith(ENV_PREFIX):
                _assign(raw_values, key[len(ENV_PREFIX):], value)

        if overrides:
            for key, value in overrides.items():
                if value is not None:
                    _assign(raw_values, key, value)
        return cls(**raw_values)

    @classmethod
    def from_snapshot(cls, snapshot: dict[str, Any]) -> "ExperimentConfig":
        return cls.model_validate(snapshot)


def _parse_value(raw: str) -> Any:
    """
    解析配置值：优先 JSON，其次逗号分隔列表，最后原样字符串。
    """
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    return text


def _assign(target: dict[str, Any], key: str, value: Any) -> None:
    """
    按 `A__B` 形式的键写入嵌套字典。
    """
    path = [segment.lower() for segment in key.split(NESTED_DELIMITER)]
    node = target
    for segment in path[:-1]:
        child = node.get(segment)
        if not isinstance(child, dict):
            child = {}
            node[segment] = child
        node = child
    node[path[-1]] = _parse_value(value) if isinstance(value, str) else value
