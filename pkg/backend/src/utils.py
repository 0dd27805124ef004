from __future__ import annotations

import hashlib
import shutil
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from loguru import logger

from services.autograd import Tensor


def derive_seed(seed: int, *labels: Any) -> int:
    """
    由清单种子与标签派生子种子，运行中的全部随机性都从这里来
    """
    text = ":".join([str(seed), *(str(label) for label in labels)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


def parameter_digest(params: Iterable[Tensor]) -> str:
    """参数字节的 SHA-256，用于断言冻结。"""
    digest = hashlib.sha256()
    for param in params:
        digest.update(np.ascontiguousarray(param.data).tobytes())
    return digest.hexdigest()


def crop_waveform(samples: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """
    随机裁剪 length 个样本；短于 length 的语句先循环重复补齐
    """
    if length < 1:
        raise ValueError(f"crop length must be positive, got {length}")
    if samples.size < length:
        reps = -(-length // samples.size)
        return np.tile(samples, reps)[:length]
    start = int(rng.integers(0, samples.size - length + 1))
    return samples[start:start + length]


def ensure_run_dir(path: str | Path, force: bool = False) -> Path:
    """
    创建运行目录；目录已存在且非空时，除非 force，否则拒绝覆盖
    """
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"run directory {path} already exists; pass --force to overwrite")
        logger.warning("Overwriting existing run directory {}", path)
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
