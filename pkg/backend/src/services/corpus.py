"""
合成跨域说话人语料、WAV 读写与语料清单。
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.io import wavfile
from scipy.signal import lfilter

from model import DomainSpec, SyntheticSpeaker, Utterance

SAMPLE_RATE_HZ = 16000
PEAK_LEVEL = 0.9
TILT_REFERENCE_HZ = 500.0

_FORMANT_RANGES_HZ = ((300.0, 800.0), (900.0, 2200.0), (2400.0, 3400.0))
_BANDWIDTH_RANGES_HZ = ((60.0, 120.0), (80.0, 160.0), (120.0, 250.0))


def generate_speakers(num_speakers: int, domain: DomainSpec, seed: int, prefix: Optional[str] = None) -> list[SyntheticSpeaker]:
    """
    按域参数为每个说话人独立抽取基频、共振峰与带宽。
    """
    if num_speakers < 2:
        raise ValueError(f"generate_corpus needs num_speakers >= 2, got {num_speakers}")
    prefix = prefix or domain.domain_id
    children = np.random.SeedSequence(seed).spawn(num_speakers)
    speakers = []
    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        speakers.append(
            SyntheticSpeaker(
                speaker_id=f"{prefix}-spk{idx:03d}",
                f0_hz=float(rng.uniform(*domain.f0_range_hz)),
                formant_hz=[float(rng.uniform(lo, hi)) for lo, hi in _FORMANT_RANGES_HZ],
                formant_bw_hz=[float(rng.uniform(lo, hi)) for lo, hi in _BANDWIDTH_RANGES_HZ],
                seed=int(child.generate_state(1)[0]),
            )
        )
    return speakers


def _f0_contour(speaker: SyntheticSpeaker, domain: DomainSpec, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(num_samples) / SAMPLE_RATE_HZ
    duration = num_samples / SAMPLE_RATE_HZ
    base = speaker.f0_hz * rng.uniform(0.95, 1.05)
    depth = rng.uniform(*domain.contour_depth)
    if domain.f0_contour == "declination":
        contour = base * (1.0 + depth * (0.5 - t / duration))
    else:
        rate = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        contour = base * (1.0 + depth * np.sin(2.0 * np.pi * rate * t + phase))
    return np.clip(contour, 50.0, 400.0)


def _apply_tilt(signal: np.ndarray, tilt_db_per_octave: float) -> np.ndarray:
    spectrum = np.fft.rfft(signal)
    freqs = np.fft.rfftfreq(signal.size, d=1.0 / SAMPLE_RATE_HZ)
    gain_db = tilt_db_per_octave * np.log2(np.maximum(freqs, 50.0) / TILT_REFERENCE_HZ)
    return np.fft.irfft(spectrum * 10.0 ** (gain_db / 20.0), n=signal.size)


def synthesize_utterance(speaker: SyntheticSpeaker, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """
    源-滤波器合成：基频轮廓上的脉冲串经过三个级联二阶共振器，
    再做频谱倾斜、加白噪声并峰值归一化到 0.9。
    """
    num_samples = int(round(rng.uniform(*domain.duration_s) * SAMPLE_RATE_HZ))
    f0 = _f0_contour(speaker, domain, num_samples, rng)
    phase = np.cumsum(f0 / SAMPLE_RATE_HZ)
    source = (np.diff(np.floor(phase), prepend=0.0) > 0).astype(np.float64)
    source += 0.01 * rng.standard_normal(num_samples)

    signal = source
    for freq, bw in zip(speaker.formant_hz, speaker.formant_bw_hz):
        r = math.exp(-math.pi * bw / SAMPLE_RATE_HZ)
        theta = 2.0 * math.pi * freq / SAMPLE_RATE_HZ
        signal = lfilter([1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r], signal)

    signal = _apply_tilt(signal, domain.spectral_tilt_db_per_octave)
    power = float(np.mean(signal * signal))
    snr_db = rng.uniform(*domain.noise_snr_db)
    signal = signal + rng.standard_normal(num_samples) * math.sqrt(power / 10.0 ** (snr_db / 10.0))
    peak = float(np.max(np.abs(signal)))
    if peak > 0:
        signal = signal * (PEAK_LEVEL / peak)
    return signal


def generate_corpus(
    num_speakers: int,
    utts_per_speaker: tuple[int, int],
    domain: DomainSpec,
    seed: int,
    prefix: Optional[str] = None,
) -> list[Utterance]:
    """
    生成一个域的语料；相同 seed 得到逐位相同的结果。

    :param utts_per_speaker: 每个说话人语句数的闭区间。
    :param prefix: 说话人 ID 前缀，默认取域名；同一域的不同划分需用不同前缀。
    """
    low, high = utts_per_speaker
    if low < 1 or high < low:
        raise ValueError(f"invalid utterance range {utts_per_speaker}")
    speakers = generate_speakers(num_speakers, domain, seed, prefix)
    utterances: list[Utterance] = []
    for speaker in speakers:
        seq = np.random.SeedSequence(speaker.seed)
        count = int(np.random.default_rng(seq).integers(low, high + 1))
        for j, child in enumerate(seq.spawn(count)):
            samples = synthesize_utterance(speaker, domain, np.random.default_rng(child))
            utterances.append(
                Utterance(
                    utt_id=f"{speaker.speaker_id}-utt{j:03d}",
                    speaker_id=speaker.speaker_id,
                    domain_id=domain.domain_id,
                    samples=samples,
                )
            )
    logger.info(
        "Generated corpus: domain={} speakers={} utterances={}", domain.domain_id, num_speakers, len(utterances)
    )
    return utterances


def speaker_labels(utterances: Sequence[Utterance]) -> tuple[np.ndarray, list[str]]:
    """返回每条语句的整数说话人标签以及按首次出现排序的说话人列表。"""
    speakers: dict[str, int] = {}
    labels = []
    for utt in utterances:
        labels.append(speakers.setdefault(utt.speaker_id, len(speakers)))
    return np.asarray(labels, dtype=np.int64), list(speakers)


def sample_subset(
    utterances: Sequence[Utterance],
    num_speakers: int,
    utts_range: tuple[int, int],
    rng: np.random.Generator,
) -> list[Utterance]:
    """
    随机挑选 num_speakers 个说话人，每人随机保留 utts_range 范围内条数的语句。
    """
    by_speaker: dict[str, list[Utterance]] = {}
    for utt in utterances:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)
    if num_speakers > len(by_speaker):
        raise ValueError(f"requested {num_speakers} speakers but the corpus has {len(by_speaker)}")
    chosen = sorted(rng.choice(sorted(by_speaker), size=num_speakers, replace=False))
    subset: list[Utterance] = []
    for speaker_id in chosen:
        pool = by_speaker[speaker_id]
        count = min(len(pool), int(rng.integers(utts_range[0], utts_range[1] + 1)))
        keep = sorted(rng.choice(len(pool), size=count, replace=False))
        subset.extend(pool[i] for i in keep)
    return subset


def load_wav(
    path: str | Path,
    utt_id: Optional[str] = None,
    speaker_id: str = "unknown",
    domain_id: str = "unknown",
) -> Utterance:
    """
    读取 16 kHz 单声道 16 位 PCM WAV，样本除以 32768 映射到 [-1, 1]，不做重采样。
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"wav file not found: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono, found {data.shape[1]} channels")
    if rate != SAMPLE_RATE_HZ:
        raise ValueError(f"{path}: expected sample rate {SAMPLE_RATE_HZ} Hz, found {rate} Hz")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, found {data.dtype}")
    return Utterance(
        utt_id=utt_id or path.stem,
        speaker_id=speaker_id,
        domain_id=domain_id,
        samples=data.astype(np.float64) / 32768.0,
        path=str(path),
    )


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, SAMPLE_RATE_HZ, pcm)


def write_manifest(path: str | Path, utterances: Iterable[Utterance]) -> None:
    """
    每行一条语句：`<utt_id> <speaker_id> <domain_id> <path>`，路径相对清单所在目录。
    """
    path = Path(path)
    lines = []
    for utt in utterances:
        if utt.path is None:
            raise ValueError(f"utterance {utt.utt_id} has no wav path; materialize the corpus first")
        wav_path = Path(utt.path)
        try:
            wav_path = wav_path.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        lines.append(f"{utt.utt_id} {utt.speaker_id} {utt.domain_id} {wav_path.as_posix()}\n")
    path.write_text("".join(lines), encoding="ascii")


def read_manifest(path: str | Path) -> list[Utterance]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus manifest not found: {path}")
    utterances = []
    for number, line in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ValueError(f"{path}:{number}: expected 4 fields, found {len(fields)}")
        utt_id, speaker_id, domain_id, wav = fields
        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        utterances.append(load_wav(wav_path, utt_id=utt_id, speaker_id=speaker_id, domain_id=domain_id))
    return utterances


def materialize_corpus(utterances: Sequence[Utterance], wav_dir: str | Path, manifest_path: str | Path) -> list[Utterance]:
    """
    把语料写成 WAV 与清单，并返回从磁盘读回的量化语句，后续命令读到的样本与此一致。
    """
    wav_dir = Path(wav_dir)
    for utt in utterances:
        write_wav(wav_dir / f"{utt.utt_id}.wav", utt.samples)
    stored = [
        load_wav(wav_dir / f"{utt.utt_id}.wav", utt_id=utt.utt_id, speaker_id=utt.speaker_id, domain_id=utt.domain_id)
        for utt in utterances
    ]
    write_manifest(manifest_path, stored)
    logger.info("Materialized {} utterances to {}", len(stored), manifest_path)
    return stored
