from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from loguru import logger

from services.sweep import CSV_COLUMNS


class SchemaError(ValueError):
    """结果 CSV 的列与约定不符。"""


@dataclass
class ResultRow:
    mode: str
    n: int
    l: int
    k: int
    score_mode: str
    eer_percent: float
    threshold: float
    num_trials: int
    seed: int


@dataclass
class GridCell:
    """同一 (mode, l, k, n, score_mode) 在不同种子上的平均。"""
    mode: str
    n: int
    l: int
    k: int
    score_mode: str
    eer_percent: float
    seeds: list[int] = field(default_factory=list)


@dataclass
class TrendNote:
    mode: str
    curve: list[tuple[int, float]]
    best_n: int
    interior: bool


@dataclass
class Report:
    markdown: str
    cells: list[GridCell]
    trends: list[TrendNote]
    plot_files: dict[str, Path] = field(default_factory=dict)


def read_results(paths: Iterable[str | Path]) -> list[ResultRow]:
    """
    读取一个或多个结果 CSV；列不符时报错并列出缺失与多余的列。
    """
    rows: list[ResultRow] = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"results csv not found: {path}")
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = list(reader.fieldnames or [])
            missing = [c for c in CSV_COLUMNS if c not in header]
            extra = [c for c in header if c not in CSV_COLUMNS]
            if missing or extra:
                raise SchemaError(f"{path}: schema mismatch, missing columns {missing}, unexpected columns {extra}")
            for number, record in enumerate(reader, start=2):
                try:
                    rows.append(
                        ResultRow(
                            mode=record["mode"],
                            n=int(record["n"]),
                            l=int(record["l"]),
                            k=int(record["k"]),
                            score_mode=record["score_mode"],
                            eer_percent=float(record["eer_percent"]),
                            threshold=float(record["threshold"]),
                            num_trials=int(record["num_trials"]),
                            seed=int(record["seed"]),
                        )
                    )
                except (TypeError, ValueError) as exc:
                    raise SchemaError(f"{path}:{number}: malformed row ({exc})") from exc
    return rows


class ReportingService:
    """
    报告服务：把扫描结果整理成 Markdown 网格与 (n, EER) 绘图数据。
    """

    def aggregate(self, rows: Sequence[ResultRow]) -> list[GridCell]:
        groups: dict[tuple[str, int, int, int, str], list[ResultRow]] = {}
        for row in rows:
            groups.setdefault((row.mode, row.l, row.k, row.n, row.score_mode), []).append(row)
        cells = [
            GridCell(
                mode=mode,
                n=n,
                l=l,
                k=k,
                score_mode=score_mode,
                eer_percent=float(np.mean([r.eer_percent for r in members])),
                seeds=[r.seed for r in members],
            )
            for (mode, l, k, n, score_mode), members in groups.items()
        ]
        return sorted(cells, key=lambda c: (c.mode, c.l, c.k, c.n, c.score_mode))

    def trends(self, cells: Sequence[GridCell]) -> list[TrendNote]:
        """
        每种模式在 k = 1 上的 EER-n 曲线，标注最小值是否落在内部。
        """
        notes = []
        for mode in sorted({c.mode for c in cells}):
            curve = sorted((c.n, c.eer_percent) for c in cells if c.mode == mode and c.k == 1)
            if not curve:
                continue
            best = min(range(len(curve)), key=lambda i: curve[i][1])
            notes.append(
                TrendNote(mode=mode, curve=curve, best_n=curve[best][0], interior=0 < best < len(curve) - 1)
            )
        return notes

    def generate_report(self, csv_paths: Sequence[str | Path], out_dir: str | Path | None = None) -> Report:
        """
        生成报告；给出 out_dir 时写出 report.md 与每种模式的绘图数据文件。
        """
        cells = self.aggregate(read_results(csv_paths))
        trends = self.trends(cells)
        markdown = self._render(cells, trends)
        report = Report(markdown=markdown, cells=cells, trends=trends)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.md").write_text(markdown, encoding="utf-8")
            report.plot_files = self._write_plot_data(cells, out)
            logger.info("Report written: {} cells, {} plot files", len(cells), len(report.plot_files))
        return report

    def _render(self, cells: Sequence[GridCell], trends: Sequence[TrendNote]) -> str:
        lines = ["# Reprogramming results", ""]
        sections = (
            ("Raw padding (k = 1)", [c for c in cells if c.k == 1]),
            ("Augmented padding (k > 1)", [c for c in cells if c.k > 1]),
        )
        for title, members in sections:
            if not members:
                continue
            lines += [
                f"## {title}",
                "",
                "| mode | l | k | n | score_mode | EER (%) | seeds |",
                "|---|---|---|---|---|---|---|",
            ]
            lines += [
                f"| {c.mode} | {c.l} | {c.k} | {c.n} | {c.score_mode} | {c.eer_percent:.2f} | {len(c.seeds)} |"
                for c in members
            ]
            lines.append("")
        if trends:
            lines += ["## EER vs n (k = 1)", ""]
            for note in trends:
                curve = ", ".join(f"n={n}: {eer:.2f}" for n, eer in note.curve)
                verdict = "interior minimum" if note.interior else "minimum at an end of the curve"
                lines.append(f"- {note.mode}: best n={note.best_n} ({verdict}); {curve}")
            lines.append("")
        return "\n".join(lines)

    def _write_plot_data(self, cells: Sequence[GridCell], out: Path) -> dict[str, Path]:
        files: dict[str, Path] = {}
        for mode, k in sorted({(c.mode, c.k) for c in cells}):
            name = f"plot_{mode}" if k == 1 else f"plot_{mode}_k{k}"
            points = sorted((c.n, c.eer_percent) for c in cells if c.mode == mode and c.k == k)
            path = out / f"{name}.dat"
            path.write_text("n eer_percent\n" + "".join(f"{n} {eer!r}\n" for n, eer in points), encoding="ascii")
            files[name] = path
        return files
