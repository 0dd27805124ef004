"""可微的对数 Mel 滤波器组前端。"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from config import FbankConfig
from services.autograd import Tensor, clamp_min, log, matmul, mul


def hz_to_mel(freq_hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges_hz(cfg: FbankConfig) -> np.ndarray:
    """num_mels + 2 个在 Mel 刻度上等距的边界频率；第 i 个滤波器中心为 edges[i+1]。"""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.upper_hz), cfg.num_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def _mel_weights(cfg: FbankConfig) -> np.ndarray:
    if cfg.fmin_hz >= cfg.upper_hz:
        raise ValueError(f"degenerate mel band: fmin={cfg.fmin_hz} >= fmax={cfg.upper_hz}")
    edges = mel_edges_hz(cfg)
    bins_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins_hz[None, :] - left) / (center - left)
    falling = (right - bins_hz[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    return weights


def mel_matrix(cfg: FbankConfig) -> Tensor:
    """
    三角 Mel 滤波器矩阵，形状 [num_mels, fft_size/2 + 1]。
    """
    return Tensor(_mel_weights(cfg))


@lru_cache(maxsize=8)
def _analysis_bases(cfg: FbankConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frame_len = cfg.frame_samples
    window = get_window("hann", frame_len, fftbins=True)
    n = np.arange(frame_len)[:, None]
    k = np.arange(cfg.fft_size // 2 + 1)[None, :]
    angle = 2.0 * np.pi * n * k / cfg.fft_size
    cos_basis, sin_basis = np.cos(angle), -np.sin(angle)
    for arr in (window, cos_basis, sin_basis):
        arr.setflags(write=False)
    return window, cos_basis, sin_basis


def num_frames(num_samples: int, cfg: FbankConfig) -> int:
    if num_samples < cfg.frame_samples:
        return 0
    return (num_samples - cfg.frame_samples) // cfg.shift_samples + 1


def fbank(waveform: Tensor, cfg: FbankConfig) -> Tensor:
    """
    波形 [T] 或 [B, T] 映射为对数 Mel 能量 [frames, num_mels]（或带批维）。

    分帧与 Mel 投影是线性的，Hann 窗逐元素相乘，功率谱为 |DFT|^2，
    全部带精确的反向规则，梯度可一路回到填充参数。
    """
    if waveform.ndim not in (1, 2):
        raise ValueError(f"fbank expects a [T] or [B, T] waveform, got shape {list(waveform.shape)}")
    if not np.all(np.isfinite(waveform.data)):
        raise ValueError("fbank: waveform contains non-finite values")
    total = waveform.shape[-1]
    frames_count = num_frames(total, cfg)
    if frames_count < 1:
        raise ValueError(
            f"fbank: waveform of {total} samples is shorter than one frame ({cfg.frame_samples} samples)"
        )

    window, cos_basis, sin_basis = _analysis_bases(cfg)
    index = (
        np.arange(frames_count)[:, None] * cfg.shift_samples + np.arange(cfg.frame_samples)[None, :]
    )
    frames = waveform[index] if waveform.ndim == 1 else waveform[:, index]
    windowed = mul(frames, window)
    real = matmul(windowed, cos_basis)
    imag = matmul(windowed, sin_basis)
    power = real * real + imag * imag
    energies = matmul(power, _mel_weights(cfg).T)
    return log(clamp_min(energies, cfg.log_floor))
