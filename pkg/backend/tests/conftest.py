from __future__ import annotations

import numpy as np
import pytest

from config import (
    BackboneConfig,
    DataConfig,
    EstimatorConfig,
    ExperimentConfig,
    FbankConfig,
    PaddingConfig,
    SweepConfig,
)
from model import DomainSpec
from services.corpus import generate_corpus
from services.networks import Backbone, SpeakerModel

TINY_FBANK = FbankConfig(num_mels=8)


def short_domain(domain_id: str, contour: str = "declination", tilt: float = -3.0) -> DomainSpec:
    return DomainSpec(
        domain_id=domain_id,
        f0_contour=contour,
        duration_s=(0.2, 0.3),
        spectral_tilt_db_per_octave=tilt,
    )


def tiny_config(**overrides) -> ExperimentConfig:
    """几秒内可以跑完训练的小配方。"""
    values = dict(
        seed=7,
        epochs=2,
        lr_drop_epochs=[1],
        batch_size=4,
        lr=1e-2,
        crop_seconds=0.1,
        padding=PaddingConfig(l=160, k=1),
        fbank=TINY_FBANK,
        backbone=BackboneConfig(num_conv_blocks=1, channels=4, kernel_size=3, embedding_dim=6),
        estimator=EstimatorConfig(channels=4, attention_blocks=1, kernel_size=3),
        data=DataConfig(
            num_source_speakers=3,
            num_source_eval_speakers=2,
            num_target_speakers=3,
            num_target_eval_speakers=2,
            utts_per_speaker=(3, 4),
            eval_utts_per_speaker=(3, 3),
            num_target_trials=4,
            num_nontarget_trials=4,
            source_domain=short_domain("source"),
            target_domain=short_domain("target", contour="tonal", tilt=-9.0),
        ),
        sweep=SweepConfig(
            n_values=[0, 80],
            k_values=[1],
            small_data_speakers=[2],
            small_data_utts=(2, 3),
            small_data_repeats=1,
        ),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def source_corpus(config):
    return generate_corpus(3, (3, 4), config.data.source_domain, seed=11)


@pytest.fixture
def target_corpus(config):
    return generate_corpus(3, (3, 4), config.data.target_domain, seed=12)


@pytest.fixture
def frozen_model(config) -> SpeakerModel:
    """随机初始化并冻结的嵌入网络。"""
    backbone = Backbone(config.backbone, config.fbank.num_mels, np.random.default_rng(5))
    backbone.freeze()
    return SpeakerModel(backbone=backbone, fbank_cfg=config.fbank)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    import os

    for key in list(os.environ):
        if key.startswith("REPROG_"):
            monkeypatch.delenv(key)
