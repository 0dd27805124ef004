"""
预训练、白盒重编程与梯度估计重编程的训练循环。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from loguru import logger

from config import ExperimentConfig
from model import Utterance
from services.autograd import Tape, Tensor, mean, stack, zero_grad
from services.corpus import speaker_labels
from services.features import fbank
from services.networks import Backbone, ClassifierHead, Estimator, SpeakerModel, aam_loss, classify
from services.optim import AdamState, adam_step, learning_rate_at
from services.probes import BlackBoxBackbone
from services.reprogram import PaddingParams, crop_and_pad_train
from utils import crop_waveform, derive_seed, parameter_digest


class DivergenceError(RuntimeError):
    """训练损失出现非有限值。"""

    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class AdaptationResult:
    """
    适配产物：填充 W、分类头（小数据模式下为 None）、估计网络 G 与逐轮历史。
    """
    padding: PaddingParams
    head: Optional[ClassifierHead]
    estimator: Optional[Estimator] = None
    history: list[EpochRecord] = field(default_factory=list)
    probe: dict[str, Any] = field(default_factory=dict)
    speakers: tuple[str, ...] = ()


@dataclass
class StepOutput:
    """
    一个训练步的前向结果。

    loss 写入 epoch 日志；routes 中每一项 (损失, 参数组) 都在同一磁带上单独反向，
    只有该组参数累加梯度。
    """
    loss: Tensor
    routes: list[tuple[Tensor, list[Tensor]]]
    metrics: dict[str, Tensor] = field(default_factory=dict)


StepFn = Callable[[list[int], np.random.Generator], StepOutput]


class TrainingService:
    """
    训练服务：所有随机性都由配置种子派生。
    """

    def __init__(self, config: ExperimentConfig) -> None:
        self._config = config
        self.history: list[EpochRecord] = []

    # ------------------------------------------------------------------
    # 预训练
    # ------------------------------------------------------------------
    def pretrain(self, corpus: Sequence[Utterance]) -> SpeakerModel:
        """
        用 AAM-Softmax 在源域 2 秒随机裁剪上训练嵌入网络与分类头，结束后冻结嵌入网络。
        """
        cfg = self._config
        labels, speakers = speaker_labels(corpus)
        if len(speakers) < 2:
            raise ValueError(f"pretrain needs at least 2 speakers, got {len(speakers)}")
        init_rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain", "init"))
        backbone = Backbone(cfg.backbone.model_copy(update={"frozen": False}), cfg.fbank.num_mels, init_rng)
        head = ClassifierHead.create(cfg.backbone.embedding_dim, len(speakers), init_rng)
        model = SpeakerModel(backbone=backbone, fbank_cfg=cfg.fbank, head=head, speakers=tuple(speakers))
        params = backbone.parameters() + [head.projection]
        logger.info(
            "Pretraining: speakers={} utterances={} params={} epochs={}",
            len(speakers), len(corpus), backbone.parameter_count() + head.projection.size, cfg.epochs,
        )

        def step(batch: list[int], rng: np.random.Generator) -> StepOutput:
            waveforms = Tensor(np.stack([crop_waveform(corpus[i].samples, cfg.crop_samples, rng) for i in batch]))
            logits = classify(backbone(fbank(waveforms, cfg.fbank)), head)
            loss = aam_loss(logits, labels[batch], cfg.aam.m, cfg.aam.s)
            return StepOutput(loss=loss, routes=[(loss, params)])

        self.history = self._run_epochs("pretrain", len(corpus), params, step)
        backbone.freeze()
        return model

    # ------------------------------------------------------------------
    # 白盒重编程
    # ------------------------------------------------------------------
    def adapt_vanilla(self, model: SpeakerModel, corpus: Sequence[Utterance]) -> AdaptationResult:
        """
        只训练 W 与分类头：裁剪 2 秒 → 随机裁剪填充 → fbank → F → 分类 → AAM。
        嵌入网络参数在训练前后逐位相同。
        """
        cfg = self._config
        self._ensure_frozen(model)
        labels, speakers = speaker_labels(corpus)
        padding, head = self._init_adaptation(model, len(speakers), "adapt_vanilla")
        params = self._trainable([padding.values, head.projection])
        before = parameter_digest(model.backbone.parameters())
        logger.info(
            "Vanilla adaptation: l={} k={} n={} speakers={} small_data={}",
            padding.total_len, padding.num_segments, padding.segment_len, len(speakers), cfg.small_data_mode,
        )

        def step(batch: list[int], rng: np.random.Generator) -> StepOutput:
            waveforms = self._padded_batch([corpus[i].samples for i in batch], padding, rng)
            logits = classify(model.embed(waveforms), head)
            loss = aam_loss(logits, labels[batch], cfg.aam.m, cfg.aam.s)
            return StepOutput(loss=loss, routes=[(loss, params)])

        history = self._run_epochs("adapt_vanilla", len(corpus), params, step)
        self._assert_unchanged(model, before)
        self.history = history
        return AdaptationResult(
            padding=padding,
            head=None if cfg.small_data_mode else head,
            history=history,
            speakers=tuple(speakers),
        )

    # ------------------------------------------------------------------
    # 梯度估计重编程
    # ------------------------------------------------------------------
    def adapt_grad_est(self, model: SpeakerModel, corpus: Sequence[Utterance]) -> AdaptationResult:
        """
        黑盒重编程：F 只通过 BlackBoxBackbone 做前向。

        每步在同一磁带上计算三个损失：蒸馏损失 mean((G(x̃) - F(x̃))²) 只更新 G；
        经 G 的分类损失只更新 W（分类头取常量副本）；F 嵌入上的分类损失只更新分类头。
        """
        cfg = self._config
        self._ensure_frozen(model)
        labels, speakers = speaker_labels(corpus)
        padding, head = self._init_adaptation(model, len(speakers), "adapt_grad_est")
        black_box = BlackBoxBackbone(model)
        estimator = Estimator(
            cfg.estimator,
            cfg.fbank.num_mels,
            black_box.embedding_dim,
            np.random.default_rng(derive_seed(cfg.seed, "adapt_grad_est", "estimator")),
        )
        padding_params = self._trainable([padding.values])
        head_params = self._trainable([head.projection])
        estimator_params = estimator.parameters()
        params = padding_params + estimator_params + head_params
        before = parameter_digest(model.backbone.parameters())
        logger.info(
            "Gradient-estimated adaptation: l={} k={} n={} speakers={} estimator_params={}",
            padding.total_len, padding.num_segments, padding.segment_len, len(speakers),
            estimator.parameter_count(),
        )

        def step(batch: list[int], rng: np.random.Generator) -> StepOutput:
            waveforms = self._padded_batch([corpus[i].samples for i in batch], padding, rng)
            batch_labels = labels[batch]
            target = black_box(waveforms)
            estimate = estimator(fbank(waveforms, cfg.fbank))
            diff = estimate - target
            distill = mean(diff * diff)
            surrogate = aam_loss(classify(estimate, head.frozen_copy()), batch_labels, cfg.aam.m, cfg.aam.s)
            routes = [(distill, estimator_params)]
            if padding_params:
                routes.append((surrogate, padding_params))
            if head_params:
                routes.append((aam_loss(classify(target, head), batch_labels, cfg.aam.m, cfg.aam.s), head_params))
            return StepOutput(loss=surrogate, routes=routes, metrics={"distill": distill})

        history = self._run_epochs("adapt_grad_est", len(corpus), params, step)
        self._assert_unchanged(model, before)
        if any(p.grad is not None for p in model.backbone.parameters()):
            raise RuntimeError("gradient buffers were allocated for backbone parameters")
        probe = black_box.as_dict()
        logger.info("Black-box probe: {}", probe)
        self.history = history
        return AdaptationResult(
            padding=padding,
            head=None if cfg.small_data_mode else head,
            estimator=estimator,
            history=history,
            probe=probe,
            speakers=tuple(speakers),
        )

    # ------------------------------------------------------------------
    # 内部工具
    # ------------------------------------------------------------------
    def _ensure_frozen(self, model: SpeakerModel) -> None:
        if not model.backbone.frozen:
            logger.info("Freezing backbone before adaptation")
            model.backbone.freeze()

    def _init_adaptation(
        self, model: SpeakerModel, num_speakers: int, phase: str
    ) -> tuple[PaddingParams, ClassifierHead]:
        cfg = self._config
        # W 与分类头各用一条随机流，分类头初值与 l 无关
        padding = PaddingParams.from_config(cfg.padding, np.random.default_rng(derive_seed(cfg.seed, phase, "padding")))
        # 小数据模式去掉分类投影，AAM 损失改用冻结的随机投影
        head = ClassifierHead.create(
            model.backbone.cfg.embedding_dim,
            num_speakers,
            np.random.default_rng(derive_seed(cfg.seed, phase, "head")),
            trainable=not cfg.small_data_mode,
        )
        return padding, head

    @staticmethod
    def _trainable(tensors: Sequence[Tensor]) -> list[Tensor]:
        return [t for t in tensors if t.requires_grad and t.size > 0]

    def _padded_batch(
        self, samples: Sequence[np.ndarray], padding: PaddingParams, rng: np.random.Generator
    ) -> Tensor:
        crops = [crop_waveform(x, self._config.crop_samples, rng) for x in samples]
        if padding.total_len == 0:
            return Tensor(np.stack(crops))
        return stack([crop_and_pad_train(Tensor(x), padding, rng).samples for x in crops])

    @staticmethod
    def _assert_unchanged(model: SpeakerModel, before: str) -> None:
        if parameter_digest(model.backbone.parameters()) != before:
            raise RuntimeError("backbone parameters changed during adaptation")

    def _run_epochs(self, phase: str, num_items: int, params: list[Tensor], step: StepFn) -> list[EpochRecord]:
        """
        通用训练循环：打乱、分批、按路由反向、Adam 更新，逐轮调整学习率并写 epoch 日志。
        """
        cfg = self._config
        history: list[EpochRecord] = []
        if not params:
            logger.warning("{}: no trainable parameters, skipping the training loop", phase)
            return history
        rng = np.random.default_rng(derive_seed(cfg.seed, phase, "batches"))
        state = AdamState(learning_rate=cfg.lr, weight_decay=cfg.weight_decay)
        epoch_log = logger.bind(epoch_log=True)

        for epoch in range(1, cfg.epochs + 1):
            state.learning_rate = learning_rate_at(epoch, cfg.lr, cfg.lr_drop_epochs, cfg.lr_drop_factor)
            order = rng.permutation(num_items)
            losses: list[float] = []
            metrics: dict[str, list[float]] = {}
            for start in range(0, num_items, cfg.batch_size):
                batch = [int(i) for i in order[start:start + cfg.batch_size]]
                zero_grad(params)
                with Tape() as tape:
                    out = step(batch, rng)
                    values = [out.loss.item()] + [route_loss.item() for route_loss, _ in out.routes]
                    if not all(math.isfinite(v) for v in values):
                        raise DivergenceError(
                            "non-finite training loss",
                            {
                                "phase": phase,
                                "epoch": epoch,
                                "step": state.step + 1,
                                "lr": state.learning_rate,
                                "loss": values,
                                "param_norms": [float(np.linalg.norm(p.data)) for p in params],
                            },
                        )
                    for route_loss, route_params in out.routes:
                        tape.backward(route_loss, inputs=route_params)
                adam_step(params, state)
                losses.append(values[0])
                for name, tensor in out.metrics.items():
                    metrics.setdefault(name, []).append(tensor.item())

            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)),
                lr=state.learning_rate,
                extra={name: float(np.mean(v)) for name, v in metrics.items()},
            )
            history.append(record)
            extra_text = "".join(f" {name}={value:.6f}" for name, value in record.extra.items())
            epoch_log.info("epoch={} loss={:.6f} lr={:.1e}{} phase={}", epoch, record.loss, record.lr, extra_text, phase)
        return history
