from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

from loguru import logger

from config import TOOL_VERSION, ExperimentConfig, RunMode
from model import EvalReport, RunManifest, TrialSet, Utterance
from services.checkpoint import load_model, load_padding, save_model, save_padding
from services.corpus import generate_corpus, materialize_corpus, read_manifest
from services.evaluator import evaluate
from services.reporter import Report, ReportingService
from services.sweep import ADAPT_MODES, SweepResult, run_small_data, run_sweep, write_results_csv, write_small_data_csv
from services.trainer import TrainingService
from services.trials import make_trials, read_trials, write_trials
from utils import derive_seed, ensure_run_dir

DATA_SPLITS = ("source_train", "source_eval", "target_train", "target_eval")
EVAL_SPLITS = ("source_eval", "target_eval")
RUN_LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <4} | using_function:{function} | {file}:{line} | {message}"


class ReprogramExperiment:
    """
    实验编排：每个命令写入独立的运行目录，附带运行清单与日志。
    """

    def __init__(self, config: ExperimentConfig, out_dir: str | Path, *, force: bool = False) -> None:
        """
        初始化实验。

        :param config: 合并后的实验配置，完整写入运行清单。
        :param out_dir: 运行目录；已存在且非空时需要 force。
        """
        self.config = config
        self.out_dir = Path(out_dir)
        self.force = force
        self.reporting = ReportingService()
        self.manifest: Optional[RunManifest] = None

    # ------------------------------------------------------------------
    # 运行目录、日志与清单
    # ------------------------------------------------------------------
    @contextmanager
    def _run(
        self,
        command: str,
        inputs: dict[str, Any],
        options: dict[str, Any],
        run_mode: Optional[RunMode] = None,
    ) -> Iterator[dict[str, str]]:
        """
        创建运行目录、挂载 run.log 与 train.log，结束时（包括失败）写出 manifest.json。
        """
        if run_mode is not None:
            self.config = self.config.model_copy(update={"mode": run_mode})
        run_dir = ensure_run_dir(self.out_dir, self.force)
        sink_ids = [
            logger.add(run_dir / "run.log", level="DEBUG", format=RUN_LOG_FORMAT),
            logger.add(
                run_dir / "train.log",
                level="INFO",
                format="{message}",
                filter=lambda record: record["extra"].get("epoch_log", False),
            ),
        ]
        outputs: dict[str, str] = {}
        logger.info(
            "Command {} started: seed={} out={} config={}",
            command, self.config.seed, run_dir, self.config.model_dump_json(),
        )
        try:
            yield outputs
        finally:
            self.manifest = RunManifest(
                command=command,
                config=self.config.model_dump(mode="json"),
                seed=self.config.seed,
                inputs={name: str(value) for name, value in inputs.items() if value is not None},
                outputs=outputs,
                options=options,
                tool_version=TOOL_VERSION,
            )
            (run_dir / "manifest.json").write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
            for sink_id in sink_ids:
                logger.remove(sink_id)

    # ------------------------------------------------------------------
    # 数据读取
    # ------------------------------------------------------------------
    @staticmethod
    def load_split(data_dir: str | Path, split: str) -> list[Utterance]:
        if split not in DATA_SPLITS:
            raise ValueError(f"unknown data split {split!r}; expected one of {DATA_SPLITS}")
        return read_manifest(Path(data_dir) / "corpus" / f"{split}.lst")

    @staticmethod
    def load_trials(data_dir: str | Path, split: str) -> TrialSet:
        if split not in EVAL_SPLITS:
            raise ValueError(f"no trial list for split {split!r}; expected one of {EVAL_SPLITS}")
        return read_trials(Path(data_dir) / "trials" / f"{split}.txt")

    # ------------------------------------------------------------------
    # 命令
    # ------------------------------------------------------------------
    def gen_data(self) -> dict[str, str]:
        """
        生成四个划分的合成语料（WAV + 清单）与两个评测划分的试验列表。
        """
        cfg = self.config
        data = cfg.data
        plan = {
            "source_train": (data.num_source_speakers, data.utts_per_speaker, data.source_domain),
            "source_eval": (data.num_source_eval_speakers, data.eval_utts_per_speaker, data.source_domain),
            "target_train": (data.num_target_speakers, data.utts_per_speaker, data.target_domain),
            "target_eval": (data.num_target_eval_speakers, data.eval_utts_per_speaker, data.target_domain),
        }
        with self._run("gen-data", {}, {}) as outputs:
            run_dir = self.out_dir
            for split, (speakers, utts, domain) in plan.items():
                corpus = generate_corpus(
                    speakers, utts, domain, derive_seed(cfg.seed, "corpus", split), prefix=split.replace("_", "-")
                )
                manifest_path = run_dir / "corpus" / f"{split}.lst"
                manifest_path.parent.mkdir(parents=True, exist_ok=True)
                stored = materialize_corpus(corpus, run_dir / "wav" / split, manifest_path)
                outputs[split] = str(manifest_path)
                if split in EVAL_SPLITS:
                    trials = make_trials(
                        stored,
                        data.num_target_trials,
                        data.num_nontarget_trials,
                        derive_seed(cfg.seed, "trials", split),
                    )
                    trial_path = run_dir / "trials" / f"{split}.txt"
                    trial_path.parent.mkdir(parents=True, exist_ok=True)
                    write_trials(trial_path, trials)
                    outputs[f"trials_{split}"] = str(trial_path)
            return dict(outputs)

    def pretrain(self, data_dir: str | Path) -> Path:
        """在源域训练划分上预训练嵌入网络，保存为 model.npz。"""
        with self._run("pretrain", {"data": data_dir}, {}, RunMode.PRETRAIN) as outputs:
            corpus = self.load_split(data_dir, "source_train")
            model = TrainingService(self.config).pretrain(corpus)
            path = save_model(self.out_dir / "model.npz", model, self.config.model_dump(mode="json"))
            outputs["model"] = str(path)
            return path

    def adapt(self, data_dir: str | Path, model_path: str | Path, mode: str) -> Path:
        """
        在目标域训练划分上做重编程适配，保存 W、分类头与（若有）估计网络。
        """
        if mode not in ADAPT_MODES:
            raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {ADAPT_MODES}")
        run_mode = RunMode.ADAPT_VANILLA if mode == "vanilla" else RunMode.ADAPT_GRAD_EST
        with self._run("adapt", {"data": data_dir, "model": model_path}, {"mode": mode}, run_mode) as outputs:
            model, _ = load_model(model_path)
            corpus = self.load_split(data_dir, "target_train")
            trainer = TrainingService(self.config)
            result = trainer.adapt_vanilla(model, corpus) if mode == "vanilla" else trainer.adapt_grad_est(model, corpus)
            snapshot = {**self.config.model_dump(mode="json"), "adapt_mode": mode}
            path = save_padding(self.out_dir / "padding.npz", result.padding, result.head, result.estimator, snapshot)
            outputs["padding"] = str(path)
            if result.probe:
                logger.info("Black-box probe counts: forward={} backward={}",
                            result.probe["forward_count"], result.probe["backward_count"])
            return path

    def evaluate(
        self,
        data_dir: str | Path,
        model_path: str | Path,
        padding_path: Optional[str | Path] = None,
        split: str = "target_eval",
    ) -> EvalReport:
        """
        评测一个划分；不给填充检查点时即为未适配基线（mode = none）。
        """
        inputs = {"data": data_dir, "model": model_path, "padding": padding_path}
        with self._run("eval", inputs, {"split": split}, RunMode.EVAL) as outputs:
            model, _ = load_model(model_path)
            padding, mode = None, "none"
            if padding_path is not None:
                padding, _, _, meta = load_padding(padding_path)
                mode = meta.get("config", {}).get("adapt_mode", "none")
            scores_path = self.out_dir / "scores.txt"
            report = evaluate(
                model,
                padding,
                self.load_trials(data_dir, split),
                self.load_split(data_dir, split),
                score_mode=self.config.score_mode,
                workers=self.config.eval_workers,
                mode=mode,
                seed=self.config.seed,
                scores_path=scores_path,
            )
            csv_path = self.out_dir / "results.csv"
            write_results_csv(csv_path, [report])
            outputs.update({"scores": str(scores_path), "results": str(csv_path)})
            return report

    def sweep(
        self,
        data_dir: str | Path,
        model_path: str | Path,
        modes: Sequence[str] = ADAPT_MODES,
        small_data: bool = False,
    ) -> SweepResult:
        """
        扫描填充长度网格并写出 results.csv；small_data 时改跑小数据协议并写出 small_data.csv。
        """
        cfg = self.config
        inputs = {"data": data_dir, "model": model_path}
        with self._run("sweep", inputs, {"modes": list(modes), "small_data": small_data}, RunMode.SWEEP) as outputs:
            model, _ = load_model(model_path)
            eval_utts = self.load_split(data_dir, "target_eval")
            trials = self.load_trials(data_dir, "target_eval")
            if small_data:
                pool = generate_corpus(
                    max(cfg.sweep.small_data_speakers),
                    cfg.sweep.small_data_utts,
                    cfg.data.target_domain,
                    derive_seed(cfg.seed, "corpus", "small_data_pool"),
                    prefix="target-pool",
                )
                records, failures = run_small_data(cfg, model, pool, eval_utts, trials, modes=modes)
                result = SweepResult(failures=failures, small_data=records)
                csv_path = self.out_dir / "small_data.csv"
                write_small_data_csv(csv_path, records)
            else:
                train_utts = self.load_split(data_dir, "target_train")
                result = run_sweep(cfg, model, train_utts, eval_utts, trials, modes=modes)
                csv_path = self.out_dir / "results.csv"
                write_results_csv(csv_path, result.reports)
            outputs["results"] = str(csv_path)
            for failure in result.failures:
                logger.error(
                    "Cell failed: mode={} n={} k={} seed={} error={}",
                    failure.mode, failure.n, failure.k, failure.seed, failure.message,
                )
            return result

    def report(self, csv_paths: Sequence[str | Path]) -> Report:
        """汇总一个或多个结果 CSV，写出 report.md 与绘图数据。"""
        inputs = {f"csv{i}": path for i, path in enumerate(csv_paths)}
        with self._run("report", inputs, {}) as outputs:
            report = self.reporting.generate_report(csv_paths, self.out_dir)
            outputs["report"] = str(self.out_dir / "report.md")
            outputs.update({name: str(path) for name, path in report.plot_files.items()})
            for note in report.trends:
                if not note.interior:
                    logger.warning(
                        "No interior EER minimum for mode={}; full curve: {}", note.mode, note.curve
                    )
            return report


def summarize_scores(report: EvalReport) -> str:
    return f"{report.mode} n={report.n} l={report.l} k={report.k} EER={report.eer_percent:.2f}% ({report.num_trials} trials)"
