"""
模型与填充检查点：.npz 归档保存具名 float64 数组，外加一条 JSON 元数据。
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
from loguru import logger

from config import TOOL_VERSION, BackboneConfig, EstimatorConfig, FbankConfig
from services.autograd import Tensor
from services.networks import Backbone, ClassifierHead, Estimator, SpeakerModel
from services.reprogram import PaddingParams

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    """检查点版本、类型或内容不匹配。"""


def _write(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()}
    payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **payload)
    logger.info("Checkpoint written: kind={} path={} arrays={}", meta["kind"], path, len(arrays))
    return path


def _read(path: str | Path, kind: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing metadata entry")
    meta = json.loads(str(arrays.pop(META_KEY)))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {meta.get('format_version')} does not match {FORMAT_VERSION}"
        )
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    return arrays, meta


def _prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}


def save_model(path: str | Path, model: SpeakerModel, config_snapshot: Optional[dict[str, Any]] = None) -> Path:
    """
    保存嵌入网络、分类头（若有）与说话人列表。
    """
    arrays = {f"backbone.{name}": value for name, value in model.backbone.state_dict().items()}
    if model.head is not None:
        arrays["head.projection"] = model.head.projection.data
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "tool_version": TOOL_VERSION,
        "fbank": model.fbank_cfg.model_dump(mode="json"),
        "backbone": model.backbone.cfg.model_dump(mode="json"),
        "speakers": list(model.speakers),
        "config": config_snapshot or {},
    }
    return _write(path, arrays, meta)


def load_model(path: str | Path) -> tuple[SpeakerModel, dict[str, Any]]:
    arrays, meta = _read(path, "model")
    fbank_cfg = FbankConfig(**meta["fbank"])
    backbone = Backbone(BackboneConfig(**meta["backbone"]), input_dim=fbank_cfg.num_mels)
    try:
        backbone.load_state_dict(_prefixed(arrays, "backbone."))
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if backbone.frozen:
        backbone.set_trainable(False)
    head = None
    if "head.projection" in arrays:
        head = ClassifierHead(projection=Tensor(arrays["head.projection"], requires_grad=True, name="head.projection"))
    model = SpeakerModel(backbone=backbone, fbank_cfg=fbank_cfg, head=head, speakers=tuple(meta["speakers"]))
    return model, meta


def save_padding(
    path: str | Path,
    padding: PaddingParams,
    head: Optional[ClassifierHead] = None,
    estimator: Optional[Estimator] = None,
    config_snapshot: Optional[dict[str, Any]] = None,
) -> Path:
    """
    保存 W（含 l、k、init_std）以及随适配一起训练的分类头与估计网络。
    """
    arrays = {"padding.values": padding.values.data}
    if head is not None:
        arrays["head.projection"] = head.projection.data
    if estimator is not None:
        arrays.update({f"estimator.{name}": value for name, value in estimator.state_dict().items()})
    meta: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "kind": "padding",
        "tool_version": TOOL_VERSION,
        "l": padding.total_len,
        "k": padding.num_segments,
        "init_std": padding.init_std,
        "config": config_snapshot or {},
    }
    if estimator is not None:
        meta["estimator"] = {
            "cfg": estimator.cfg.model_dump(mode="json"),
            "input_dim": estimator.input_dim,
            "embedding_dim": estimator.embedding_dim,
        }
    return _write(path, arrays, meta)


def load_padding(
    path: str | Path,
) -> tuple[PaddingParams, Optional[ClassifierHead], Optional[Estimator], dict[str, Any]]:
    arrays, meta = _read(path, "padding")
    values = arrays["padding.values"]
    if values.shape != (meta["l"],):
        raise CheckpointError(f"{path}: padding values of shape {list(values.shape)} do not match l={meta['l']}")
    padding = PaddingParams(
        values=Tensor(values, requires_grad=values.size > 0, name="padding.W"),
        num_segments=meta["k"],
        init_std=meta["init_std"],
    )
    head = None
    if "head.projection" in arrays:
        head = ClassifierHead(projection=Tensor(arrays["head.projection"], requires_grad=True, name="head.projection"))
    estimator = None
    if "estimator" in meta:
        spec = meta["estimator"]
        estimator = Estimator(EstimatorConfig(**spec["cfg"]), spec["input_dim"], spec["embedding_dim"])
        try:
            estimator.load_state_dict(_prefixed(arrays, "estimator."))
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
    return padding, head, estimator, meta
