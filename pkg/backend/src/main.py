from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from dotenv import load_dotenv
from loguru import logger

from config import TOOL_VERSION, ExperimentConfig
from experiment import ReprogramExperiment, summarize_scores
from model import RunManifest
from services.sweep import ADAPT_MODES

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_RUNTIME_ERROR = 2
EXIT_PARTIAL_SWEEP = 3

CONSOLE_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <4}</level> | <cyan>using_function:{function}</cyan> | <cyan>{file}:{line}</cyan> | <level>{message}</level>"


def _configure_logging() -> None:
    logger.remove()
    # 添加控制台日志处理程序
    logger.add(
        sys.stderr,
        level="INFO",
        format=CONSOLE_FORMAT,
        colorize=True,
        filter=lambda record: record["level"].no < 40,
    )
    # 添加错误日志处理程序
    logger.add(
        sink=sys.stderr,
        level="ERROR",
        format=CONSOLE_FORMAT,
        colorize=True,
    )


def build_parser() -> argparse.ArgumentParser:
    """
    构建命令行解析器：gen-data / pretrain / adapt / eval / sweep / report。
    """
    parser = argparse.ArgumentParser(
        prog="reprog",
        description="Adversarial reprogramming toolkit for cross-domain speaker verification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="dotenv-style config file")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--seed", type=int, help="seed for every random draw in the run")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. PADDING__L=3200",
    )
    common.add_argument("--from-manifest", type=Path, help="re-execute the run described by a manifest.json")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpora and trial lists")

    pretrain = sub.add_parser("pretrain", parents=[common], help="pretrain the embedding network on the source domain")
    pretrain.add_argument("--data", type=Path, help="gen-data run directory")

    adapt = sub.add_parser("adapt", parents=[common], help="train padding parameters on the target domain")
    adapt.add_argument("--data", type=Path)
    adapt.add_argument("--model", type=Path, help="pretrained model checkpoint")
    adapt.add_argument("--mode", choices=ADAPT_MODES, default="vanilla")

    evaluate = sub.add_parser("eval", parents=[common], help="score a trial list and compute EER")
    evaluate.add_argument("--data", type=Path)
    evaluate.add_argument("--model", type=Path)
    evaluate.add_argument("--padding", type=Path, help="padding checkpoint; omit for the unadapted baseline")
    evaluate.add_argument("--split", choices=("target_eval", "source_eval"), default="target_eval")

    sweep = sub.add_parser("sweep", parents=[common], help="sweep padding lengths n and copies k")
    sweep.add_argument("--data", type=Path)
    sweep.add_argument("--model", type=Path)
    sweep.add_argument("--mode", choices=(*ADAPT_MODES, "both"), default="both")
    sweep.add_argument("--small-data", action="store_true", help="run the small-data protocol instead of the grid")

    report = sub.add_parser("report", parents=[common], help="render results CSVs as a markdown grid")
    report.add_argument("--csv", type=Path, nargs="*", default=[], help="results CSV files")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value
    if args.seed is not None:
        values["seed"] = args.seed
    return values


def _require(value: Optional[Path], flag: str) -> Path:
    if value is None:
        raise ValueError(f"{flag} is required for this command")
    return value


def _plan_from_args(args: argparse.Namespace) -> tuple[ExperimentConfig, str, dict[str, Any]]:
    config = ExperimentConfig.from_sources(args.config, _overrides(args))
    params: dict[str, Any] = {}
    if args.command in ("pretrain", "adapt", "eval", "sweep"):
        params["data"] = _require(args.data, "--data")
    if args.command in ("adapt", "eval", "sweep"):
        params["model"] = _require(args.model, "--model")
    if args.command == "adapt":
        params["mode"] = args.mode
    if args.command == "eval":
        params["padding"] = args.padding
        params["split"] = args.split
    if args.command == "sweep":
        params["modes"] = list(ADAPT_MODES) if args.mode == "both" else [args.mode]
        params["small_data"] = args.small_data
    if args.command == "report":
        if not args.csv:
            raise ValueError("--csv needs at least one results file")
        params["csv_paths"] = list(args.csv)
    return config, args.command, params


def _plan_from_manifest(path: Path) -> tuple[ExperimentConfig, str, dict[str, Any]]:
    """
    从运行清单重建配置、命令与参数。
    """
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = RunManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    if manifest.tool_version != TOOL_VERSION:
        logger.warning("Manifest written by version {}, running {}", manifest.tool_version, TOOL_VERSION)
    config = ExperimentConfig.from_snapshot(manifest.config)
    params: dict[str, Any] = {}
    inputs = manifest.inputs
    for key in ("data", "model", "padding"):
        if key in inputs:
            params[key] = Path(inputs[key])
    if manifest.command == "eval":
        params.setdefault("padding", None)
        params["split"] = manifest.options.get("split", "target_eval")
    if manifest.command == "adapt":
        params["mode"] = manifest.options["mode"]
    if manifest.command == "sweep":
        params["modes"] = manifest.options.get("modes", list(ADAPT_MODES))
        params["small_data"] = manifest.options.get("small_data", False)
    if manifest.command == "report":
        keys = sorted((k for k in inputs if k.startswith("csv")), key=lambda k: int(k[3:]))
        params["csv_paths"] = [Path(inputs[k]) for k in keys]
    return config, manifest.command, params


def execute(command: str, experiment: ReprogramExperiment, params: dict[str, Any]) -> int:
    if command == "gen-data":
        outputs = experiment.gen_data()
        logger.info("Corpus written: {}", outputs)
    elif command == "pretrain":
        logger.info("Model written: {}", experiment.pretrain(params["data"]))
    elif command == "adapt":
        logger.info("Padding written: {}", experiment.adapt(params["data"], params["model"], params["mode"]))
    elif command == "eval":
        report = experiment.evaluate(params["data"], params["model"], params.get("padding"), params["split"])
        print(summarize_scores(report))
    elif command == "sweep":
        result = experiment.sweep(params["data"], params["model"], params["modes"], params["small_data"])
        if result.failures and result.succeeded == 0:
            logger.error("Every sweep cell failed ({} cells)", len(result.failures))
            return EXIT_RUNTIME_ERROR
        if result.partial:
            logger.error("{} of {} sweep cells failed", len(result.failures), len(result.failures) + result.succeeded)
            return EXIT_PARTIAL_SWEEP
    elif command == "report":
        print(experiment.report(params["csv_paths"]).markdown)
    else:
        raise ValueError(f"unknown command {command!r}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    命令行入口；返回码 0 成功，1 配置或用户错误，2 运行时失败，3 扫描部分失败。
    """
    load_dotenv()
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.from_manifest is not None:
            config, command, params = _plan_from_manifest(args.from_manifest)
        else:
            config, command, params = _plan_from_args(args)
        experiment = ReprogramExperiment(config, args.out, force=args.force)
        return execute(command, experiment, params)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        logger.error("{}", exc)
        return EXIT_USER_ERROR
    except Exception:
        logger.exception("Command failed")
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
