from typing import Any, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator


class SyntheticSpeaker(BaseModel):
    """
    合成说话人：基频与三个共振峰。
    """
    speaker_id: str
    f0_hz: float = Field(..., ge=80.0, le=300.0, description="基频")
    formant_hz: List[float] = Field(..., min_length=3, max_length=3, description="共振峰频率，严格递增")
    formant_bw_hz: List[float] = Field(..., min_length=3, max_length=3, description="共振峰带宽")
    seed: int

    model_config = {
        "frozen": True,
        "kw_only": True,
    }

    @field_validator("formant_hz")
    @classmethod
    def _increasing(cls, value: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"formants must be strictly increasing, got {value}")
        return value


class DomainSpec(BaseModel):
    """
    一个"语言"域的生成参数区间（源域预训练 / 目标域适配）。
    """
    domain_id: str
    f0_contour: Literal["declination", "tonal"] = Field(default="declination", description="基频轮廓族")
    contour_depth: tuple[float, float] = Field(default=(0.05, 0.15), description="轮廓相对幅度范围")
    f0_range_hz: tuple[float, float] = Field(default=(80.0, 300.0), description="说话人基频抽样范围")
    duration_s: tuple[float, float] = Field(default=(2.5, 4.0), description="语句时长范围")
    noise_snr_db: tuple[float, float] = Field(default=(25.0, 35.0), description="加性噪声信噪比范围")
    spectral_tilt_db_per_octave: float = Field(default=-3.0, description="频谱倾斜")

    model_config = {"frozen": True}

    @field_validator("contour_depth", "f0_range_hz", "duration_s", "noise_snr_db")
    @classmethod
    def _ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[1] < value[0]:
            raise ValueError(f"range upper bound below lower bound: {value}")
        return value

    @field_validator("f0_range_hz")
    @classmethod
    def _f0_bounds(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[0] < 80.0 or value[1] > 300.0:
            raise ValueError(f"f0 range must lie in [80, 300] Hz, got {value}")
        return value


class Utterance(BaseModel):
    """单条语句，16 kHz 采样，幅度在 [-1, 1]。"""
    utt_id: str
    speaker_id: str
    domain_id: str
    samples: Any = Field(..., description="float64 波形")
    path: Optional[str] = Field(default=None, description="WAV 文件路径")

    model_config = {
        "arbitrary_types_allowed": True,
        "kw_only": True,
    }

    @field_validator("samples")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("utterance samples must be a non-empty 1-D array")
        if np.any(np.abs(arr) > 1.0):
            raise ValueError("utterance samples must lie in [-1, 1]")
        return arr


class Trial(BaseModel):
    label: Literal["target", "nontarget"]
    enroll_utt_id: str
    test_utt_id: str

    model_config = {"frozen": True}


class TrialSet(BaseModel):
    """
    试验列表：至少一个同说话人与一个异说话人试验，不含自配对与重复的语句对。
    """
    trials: List[Trial] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_trials(self) -> "TrialSet":
        labels = {trial.label for trial in self.trials}
        if labels != {"target", "nontarget"}:
            raise ValueError("a trial set needs at least one target and one nontarget trial")
        seen: set[frozenset[str]] = set()
        for trial in self.trials:
            if trial.enroll_utt_id == trial.test_utt_id:
                raise ValueError(f"trial pairs utterance {trial.enroll_utt_id} with itself")
            pair = frozenset((trial.enroll_utt_id, trial.test_utt_id))
            if pair in seen:
                raise ValueError(f"duplicate trial {trial.enroll_utt_id} {trial.test_utt_id}")
            seen.add(pair)
        return self

    def utterance_ids(self) -> List[str]:
        seen: dict[str, None] = {}
        for trial in self.trials:
            seen.setdefault(trial.enroll_utt_id)
            seen.setdefault(trial.test_utt_id)
        return list(seen)

    def __len__(self) -> int:
        return len(self.trials)


class EvalReport(BaseModel):
    """
    一次评测的结果，附带重建扫描网格所需的元数据。
    """
    eer_percent: float = Field(..., ge=0.0, le=100.0)
    threshold_at_eer: float
    num_trials: int
    mode: str = Field(default="none", description="适配方式：none / vanilla / grad_est")
    n: int = 0
    l: int = 0
    k: int = 1
    score_mode: str = "mean_all"
    seed: int = 0


class RunManifest(BaseModel):
    """
    运行清单：配置快照、种子、检查点与输出路径。仅凭清单即可重跑。
    """
    command: str
    config: dict[str, Any]
    seed: int
    inputs: dict[str, str] = Field(default_factory=dict, description="输入检查点 / 语料路径")
    outputs: dict[str, str] = Field(default_factory=dict, description="输出文件路径")
    options: dict[str, Any] = Field(default_factory=dict, description="命令专属参数")
    tool_version: str

    model_config = {
        "populate_by_name": True,
        "kw_only": True,
    }
