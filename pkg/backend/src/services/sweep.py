"""
填充长度扫描：在共享的预训练模型上逐格训练并评测。
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from loguru import logger

from config import ExperimentConfig, PaddingConfig
from model import EvalReport, TrialSet, Utterance
from services.corpus import sample_subset
from services.evaluator import evaluate
from services.networks import SpeakerModel
from services.trainer import TrainingService
from utils import derive_seed

CSV_COLUMNS = ("mode", "n", "l", "k", "score_mode", "eer_percent", "threshold", "num_trials", "seed")
ADAPT_MODES = ("vanilla", "grad_est")


@dataclass(frozen=True)
class CellFailure:
    """失败的格点：身份与错误信息。其余格点照常运行。"""
    mode: str
    n: int
    k: int
    seed: int
    message: str


@dataclass
class SweepResult:
    reports: list[EvalReport] = field(default_factory=list)
    failures: list[CellFailure] = field(default_factory=list)
    small_data: list["SmallDataRecord"] = field(default_factory=list)

    @property
    def succeeded(self) -> int:
        return len(self.reports) + len(self.small_data)

    @property
    def partial(self) -> bool:
        return bool(self.failures) and self.succeeded > 0


@dataclass
class SweepCell:
    mode: str
    n: int
    k: int
    cfg: ExperimentConfig
    model: SpeakerModel
    train_utts: Sequence[Utterance]
    eval_utts: Sequence[Utterance]
    trials: TrialSet


def cell_config(base_cfg: ExperimentConfig, n: int, k: int, seed: int, small_data: bool = False) -> ExperimentConfig:
    """格点配置：l = n·k，其余沿用基础配方。"""
    snapshot = base_cfg.model_dump(mode="json")
    snapshot["padding"] = PaddingConfig(l=n * k, k=k, init_std=base_cfg.padding.init_std).model_dump()
    snapshot["seed"] = seed
    snapshot["small_data_mode"] = small_data or base_cfg.small_data_mode
    return ExperimentConfig.model_validate(snapshot)


def run_cell(cell: SweepCell) -> EvalReport:
    """
    训练并评测一个格点。
    """
    trainer = TrainingService(cell.cfg)
    if cell.mode == "vanilla":
        result = trainer.adapt_vanilla(cell.model, cell.train_utts)
    elif cell.mode == "grad_est":
        result = trainer.adapt_grad_est(cell.model, cell.train_utts)
    else:
        raise ValueError(f"unknown adaptation mode {cell.mode!r}; expected one of {ADAPT_MODES}")
    return evaluate(
        cell.model,
        result.padding,
        cell.trials,
        cell.eval_utts,
        score_mode=cell.cfg.score_mode,
        workers=cell.cfg.eval_workers,
        mode=cell.mode,
        seed=cell.cfg.seed,
    )


def _safe_run(cell: SweepCell) -> EvalReport | CellFailure:
    try:
        return run_cell(cell)
    except Exception as exc:
        logger.opt(exception=exc).error("Sweep cell failed: mode={} n={} k={}", cell.mode, cell.n, cell.k)
        return CellFailure(mode=cell.mode, n=cell.n, k=cell.k, seed=cell.cfg.seed, message=f"{type(exc).__name__}: {exc}")


def cell_seeds(base_seed: int, repeats: int) -> list[int]:
    """repeats = 1 时沿用清单种子，否则由它派生每次重复的种子。"""
    if repeats == 1:
        return [base_seed]
    return [derive_seed(base_seed, "repeat", r) for r in range(repeats)]


def run_sweep(
    base_cfg: ExperimentConfig,
    model: SpeakerModel,
    train_utts: Sequence[Utterance],
    eval_utts: Sequence[Utterance],
    trials: TrialSet,
    n_values: Optional[Iterable[int]] = None,
    k_values: Optional[Iterable[int]] = None,
    modes: Sequence[str] = ("vanilla",),
) -> SweepResult:
    """
    对 (mode, k, n, seed) 网格逐格适配并评测，所有格点共享同一个冻结模型。
    单个格点失败会被记录为 CellFailure，其余格点继续。
    """
    n_values = list(n_values if n_values is not None else base_cfg.sweep.n_values)
    k_values = list(k_values if k_values is not None else base_cfg.sweep.k_values)
    for mode in modes:
        if mode not in ADAPT_MODES:
            raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {ADAPT_MODES}")
    model.backbone.freeze()

    cells = [
        SweepCell(mode, n, k, cell_config(base_cfg, n, k, seed), model, train_utts, eval_utts, trials)
        for mode in modes
        for k in k_values
        for n in n_values
        for seed in cell_seeds(base_cfg.seed, base_cfg.sweep.repeats)
    ]
    logger.info(
        "Sweep: modes={} n={} k={} repeats={} cells={} workers={}",
        list(modes), n_values, k_values, base_cfg.sweep.repeats, len(cells), base_cfg.sweep.workers,
    )
    if base_cfg.sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=base_cfg.sweep.workers) as pool:
            outcomes = list(pool.map(_safe_run, cells))
    else:
        outcomes = [_safe_run(cell) for cell in cells]

    result = SweepResult()
    for outcome in outcomes:
        if isinstance(outcome, CellFailure):
            result.failures.append(outcome)
        else:
            result.reports.append(outcome)
    logger.info("Sweep finished: reports={} failures={}", len(result.reports), len(result.failures))
    return result


@dataclass
class SmallDataRecord:
    mode: str
    num_speakers: int
    n: int
    eer_percent: float
    eer_std: float
    repeats: int


def run_small_data(
    base_cfg: ExperimentConfig,
    model: SpeakerModel,
    target_pool: Sequence[Utterance],
    eval_utts: Sequence[Utterance],
    trials: TrialSet,
    speaker_counts: Optional[Sequence[int]] = None,
    repeats: Optional[int] = None,
    modes: Sequence[str] = ("vanilla",),
) -> tuple[list[SmallDataRecord], list[CellFailure]]:
    """
    小数据协议：每个说话人数、每次重复都重新抽取训练子集（每人 20–50 条），
    在 n = 0 与配置的 n 下以小数据模式适配，按格点平均 EER。
    """
    speaker_counts = list(speaker_counts or base_cfg.sweep.small_data_speakers)
    repeats = repeats or base_cfg.sweep.small_data_repeats
    k = base_cfg.padding.k
    n_values = sorted({0, base_cfg.padding.n})
    model.backbone.freeze()
    records: list[SmallDataRecord] = []
    failures: list[CellFailure] = []
    for mode in modes:
        for count in speaker_counts:
            for n in n_values:
                eers = []
                for r in range(repeats):
                    rng = np.random.default_rng(derive_seed(base_cfg.seed, "small_data", count, r))
                    subset = sample_subset(target_pool, count, base_cfg.sweep.small_data_utts, rng)
                    cell_k = k if n else 1
                    cell_seed = derive_seed(base_cfg.seed, "small_data", count, r, "cell")
                    cfg = cell_config(base_cfg, n, cell_k, cell_seed, small_data=True)
                    outcome = _safe_run(SweepCell(mode, n, cell_k, cfg, model, subset, eval_utts, trials))
                    if isinstance(outcome, CellFailure):
                        failures.append(outcome)
                    else:
                        eers.append(outcome.eer_percent)
                if eers:
                    records.append(
                        SmallDataRecord(mode, count, n, float(np.mean(eers)), float(np.std(eers)), len(eers))
                    )
                    logger.info(
                        "Small-data cell: mode={} speakers={} n={} eer={:.3f}% over {} repeats",
                        mode, count, n, records[-1].eer_percent, len(eers),
                    )
    return records, failures


def write_results_csv(path: str | Path, reports: Iterable[EvalReport]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(
                [r.mode, r.n, r.l, r.k, r.score_mode, repr(r.eer_percent), repr(r.threshold_at_eer), r.num_trials, r.seed]
            )


def write_small_data_csv(path: str | Path, records: Iterable[SmallDataRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("mode", "num_speakers", "n", "eer_percent", "eer_std", "repeats"))
        for rec in records:
            writer.writerow([rec.mode, rec.num_speakers, rec.n, repr(rec.eer_percent), repr(rec.eer_std), rec.repeats])
