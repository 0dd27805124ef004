"""
说话人验证评测：k 副本扩展 → 嵌入 → 分数矩阵 → 试验分数 → EER。
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from loguru import logger
from sklearn.metrics import roc_curve

from config import ScoreMode
from model import EvalReport, TrialSet, Utterance
from services.autograd import Tensor, no_tape
from services.networks import SpeakerModel
from services.reprogram import PaddingParams, expand_and_pad_infer, score_matrix, trial_score


def compute_eer(target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> tuple[float, float]:
    """
    EER 与对应阈值。

    阈值取 roc_curve 给出的全部不同分数（外加一个略大于最大值的哨兵），
    FRR(t) = 1 - TPR(t) = frac(target < t)，FAR(t) = FPR(t) = frac(nontarget >= t)。
    FRR - FAR 恰为 0 时直接取该点，否则在首次变号的相邻阈值之间线性插值。
    返回的 EER 为 [0, 1] 内的比例。
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise ValueError("compute_eer needs non-empty target and nontarget score lists")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise ValueError("compute_eer: scores must be finite")

    labels = np.concatenate([np.ones(tar.size, dtype=int), np.zeros(non.size, dtype=int)])
    fpr, tpr, thresholds = roc_curve(labels, np.concatenate([tar, non]), pos_label=1, drop_intermediate=False)
    # roc_curve 按阈值降序返回，首个阈值是 inf；翻转为升序并把 inf 换成哨兵
    far, frr, thresholds = fpr[::-1], 1.0 - tpr[::-1], thresholds[::-1].copy()
    thresholds[-1] = np.nextafter(max(tar[-1], non[-1]), np.inf)
    gap = frr - far

    exact = np.flatnonzero(gap == 0)
    if exact.size:
        idx = int(exact[0])
        return float(frr[idx]), float(thresholds[idx])
    hi = int(np.flatnonzero(gap > 0)[0])
    lo = hi - 1
    alpha = -gap[lo] / (gap[hi] - gap[lo])
    eer = frr[lo] + alpha * (frr[hi] - frr[lo])
    threshold = thresholds[lo] + alpha * (thresholds[hi] - thresholds[lo])
    return float(eer), float(threshold)


def extract_embeddings(
    model: SpeakerModel,
    padding: Optional[PaddingParams],
    utterances: Mapping[str, Utterance],
    utt_ids: Sequence[str],
    workers: int = 1,
) -> dict[str, list[Tensor]]:
    """
    每条语句按整句长度扩展为 k 个填充副本并提取嵌入；padding 为 None 时直接使用原波形。
    """
    missing = [utt_id for utt_id in utt_ids if utt_id not in utterances]
    if missing:
        raise ValueError(f"trial references unknown utterance ids: {missing[:5]}")

    def embed(utt_id: str) -> list[Tensor]:
        x = Tensor(utterances[utt_id].samples)
        with no_tape():
            if padding is None:
                return [model.embed(x)]
            return [model.embed(copy.samples) for copy in expand_and_pad_infer(x, padding)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            embeddings = list(pool.map(embed, utt_ids))
    else:
        embeddings = [embed(utt_id) for utt_id in utt_ids]
    return dict(zip(utt_ids, embeddings))


def score_trials(
    model: SpeakerModel,
    padding: Optional[PaddingParams],
    trials: TrialSet,
    utterances: Mapping[str, Utterance] | Sequence[Utterance],
    score_mode: ScoreMode | str = ScoreMode.MEAN_ALL,
    workers: int = 1,
) -> list[float]:
    """按试验顺序返回分数；归约按固定顺序进行，结果可逐位复现。"""
    if not isinstance(utterances, Mapping):
        utterances = {utt.utt_id: utt for utt in utterances}
    embeddings = extract_embeddings(model, padding, utterances, trials.utterance_ids(), workers)
    with no_tape():
        return [
            trial_score(score_matrix(embeddings[t.enroll_utt_id], embeddings[t.test_utt_id]), score_mode)
            for t in trials.trials
        ]


def evaluate(
    model: SpeakerModel,
    padding: Optional[PaddingParams],
    trials: TrialSet,
    utterances: Mapping[str, Utterance] | Sequence[Utterance],
    score_mode: ScoreMode | str = ScoreMode.MEAN_ALL,
    workers: int = 1,
    mode: str = "none",
    seed: int = 0,
    scores_path: Optional[str | Path] = None,
) -> EvalReport:
    """
    评测一组试验并返回 EvalReport；l = 0 或不给填充时即为未适配的余弦基线。
    """
    scores = score_trials(model, padding, trials, utterances, score_mode, workers)
    target = [s for s, t in zip(scores, trials.trials) if t.label == "target"]
    nontarget = [s for s, t in zip(scores, trials.trials) if t.label == "nontarget"]
    eer, threshold = compute_eer(target, nontarget)
    if scores_path is not None:
        write_scores(scores_path, trials, scores)
    report = EvalReport(
        eer_percent=100.0 * eer,
        threshold_at_eer=threshold,
        num_trials=len(trials),
        mode=mode,
        n=0 if padding is None else padding.segment_len,
        l=0 if padding is None else padding.total_len,
        k=1 if padding is None else padding.num_segments,
        score_mode=ScoreMode(score_mode).value,
        seed=seed,
    )
    logger.info(
        "Evaluation: mode={} n={} l={} k={} trials={} eer={:.3f}%",
        report.mode, report.n, report.l, report.k, report.num_trials, report.eer_percent,
    )
    return report


def write_scores(path: str | Path, trials: TrialSet, scores: Sequence[float]) -> None:
    """`<score> <enroll_utt_id> <test_utt_id>`，一行一个试验。"""
    if len(scores) != len(trials):
        raise ValueError(f"{len(scores)} scores for {len(trials)} trials")
    lines = [f"{score!r} {t.enroll_utt_id} {t.test_utt_id}\n" for score, t in zip(scores, trials.trials)]
    Path(path).write_text("".join(lines), encoding="ascii")


def read_scores(path: str | Path) -> list[tuple[float, str, str]]:
    rows = []
    for number, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"{path}:{number}: expected '<score> <enroll> <test>', found {line!r}")
        rows.append((float(fields[0]), fields[1], fields[2]))
    return rows
