"""试验列表的生成与读写。"""

from __future__ import annotations

from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from loguru import logger

from model import Trial, TrialSet, Utterance


def make_trials(utts: Sequence[Utterance], num_target: int, num_nontarget: int, seed: int) -> TrialSet:
    """
    无放回地抽取同说话人与异说话人语句对，任何试验都不会把语句与自身配对。
    """
    if num_target < 1 or num_nontarget < 1:
        raise ValueError(
            f"make_trials needs at least one target and one nontarget trial, got {num_target}+{num_nontarget}"
        )
    target_pairs: list[tuple[int, int]] = []
    nontarget_pairs: list[tuple[int, int]] = []
    for i, j in combinations(range(len(utts)), 2):
        if utts[i].speaker_id == utts[j].speaker_id:
            target_pairs.append((i, j))
        else:
            nontarget_pairs.append((i, j))
    if num_target > len(target_pairs):
        raise ValueError(f"requested {num_target} target trials but only {len(target_pairs)} pairs exist")
    if num_nontarget > len(nontarget_pairs):
        raise ValueError(f"requested {num_nontarget} nontarget trials but only {len(nontarget_pairs)} pairs exist")

    rng = np.random.default_rng(seed)
    chosen_target = rng.choice(len(target_pairs), size=num_target, replace=False)
    chosen_nontarget = rng.choice(len(nontarget_pairs), size=num_nontarget, replace=False)
    trials = [
        Trial(label="target", enroll_utt_id=utts[i].utt_id, test_utt_id=utts[j].utt_id)
        for i, j in (target_pairs[c] for c in sorted(chosen_target))
    ]
    trials += [
        Trial(label="nontarget", enroll_utt_id=utts[i].utt_id, test_utt_id=utts[j].utt_id)
        for i, j in (nontarget_pairs[c] for c in sorted(chosen_nontarget))
    ]
    logger.debug("Made trials: target={} nontarget={}", num_target, num_nontarget)
    return TrialSet(trials=trials)


def write_trials(path: str | Path, trials: TrialSet) -> None:
    """`<0|1> <enroll_utt_id> <test_utt_id>`，一行一个试验。"""
    lines = [
        f"{1 if trial.label == 'target' else 0} {trial.enroll_utt_id} {trial.test_utt_id}\n"
        for trial in trials.trials
    ]
    Path(path).write_text("".join(lines), encoding="ascii")


def read_trials(path: str | Path) -> TrialSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trial list not found: {path}")
    trials = []
    for number, line in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3 or fields[0] not in ("0", "1"):
            raise ValueError(f"{path}:{number}: expected '<0|1> <enroll> <test>', found {line!r}")
        trials.append(
            Trial(
                label="target" if fields[0] == "1" else "nontarget",
                enroll_utt_id=fields[1],
                test_utt_id=fields[2],
            )
        )
    return TrialSet(trials=trials)
