import csv

import pytest

from conftest import tiny_config
from model import EvalReport
from services import sweep as sweep_module
from services.sweep import (
    CSV_COLUMNS,
    SmallDataRecord,
    cell_config,
    cell_seeds,
    run_small_data,
    run_sweep,
    write_results_csv,
    write_small_data_csv,
)
from services.trials import make_trials


@pytest.fixture
def trials(target_corpus):
    return make_trials(target_corpus, 4, 4, seed=0)


def _fake_report(cell) -> EvalReport:
    return EvalReport(
        eer_percent=float(cell.n) / 10.0,
        threshold_at_eer=0.0,
        num_trials=len(cell.trials),
        mode=cell.mode,
        n=cell.n,
        l=cell.cfg.padding.l,
        k=cell.cfg.padding.k,
        seed=cell.cfg.seed,
    )


class TestCellConfig:
    def test_padding_length_is_n_times_k(self, config):
        cfg = cell_config(config, 80, 2, seed=3)
        assert (cfg.padding.l, cfg.padding.k, cfg.padding.n) == (160, 2, 80)
        assert cfg.seed == 3
        assert cfg.epochs == config.epochs

    def test_small_data_forces_schedule(self, config):
        cfg = cell_config(config, 0, 1, seed=3, small_data=True)
        assert cfg.small_data_mode and cfg.epochs == 100 and cfg.lr_drop_epochs == [60, 80]

    def test_repeat_seeds(self):
        assert cell_seeds(7, 1) == [7]
        seeds = cell_seeds(7, 3)
        assert len(set(seeds)) == 3 and seeds == cell_seeds(7, 3)


class TestRunSweep:
    def test_grid_over_modes_and_lengths(self, config, frozen_model, target_corpus, trials):
        result = run_sweep(config, frozen_model, target_corpus, target_corpus, trials, modes=("vanilla", "grad_est"))
        assert not result.failures
        cells = [(r.mode, r.n, r.l, r.k) for r in result.reports]
        assert cells == [
            ("vanilla", 0, 0, 1),
            ("vanilla", 80, 80, 1),
            ("grad_est", 0, 0, 1),
            ("grad_est", 80, 80, 1),
        ]
        assert all(0.0 <= r.eer_percent <= 100.0 for r in result.reports)

    def test_explicit_grid_and_repeats(self, frozen_model, target_corpus, trials, monkeypatch):
        monkeypatch.setattr(sweep_module, "run_cell", _fake_report)
        cfg = tiny_config(sweep={"n_values": [0], "k_values": [1], "repeats": 2})
        result = run_sweep(cfg, frozen_model, target_corpus, target_corpus, trials, n_values=[40, 80], k_values=[1, 2])
        assert len(result.reports) == 2 * 2 * 2
        assert {(r.n, r.k) for r in result.reports} == {(40, 1), (80, 1), (40, 2), (80, 2)}
        assert all(r.l == r.n * r.k for r in result.reports)
        assert len({r.seed for r in result.reports}) == 2

    def test_failed_cell_does_not_stop_the_sweep(self, config, frozen_model, target_corpus, trials, monkeypatch):
        def flaky(cell):
            if cell.n == 80:
                raise RuntimeError("boom")
            return _fake_report(cell)

        monkeypatch.setattr(sweep_module, "run_cell", flaky)
        result = run_sweep(config, frozen_model, target_corpus, target_corpus, trials)
        assert [r.n for r in result.reports] == [0]
        assert len(result.failures) == 1
        failure = result.failures[0]
        assert (failure.mode, failure.n, failure.k) == ("vanilla", 80, 1)
        assert "RuntimeError: boom" in failure.message
        assert result.partial

    def test_all_cells_failing_is_not_partial(self, config, frozen_model, target_corpus, trials, monkeypatch):
        def broken(cell):
            raise ValueError("bad")

        monkeypatch.setattr(sweep_module, "run_cell", broken)
        result = run_sweep(config, frozen_model, target_corpus, target_corpus, trials)
        assert result.succeeded == 0 and not result.partial
        assert len(result.failures) == 2

    def test_unknown_mode_rejected_before_training(self, config, frozen_model, target_corpus, trials, monkeypatch):
        calls = []
        monkeypatch.setattr(sweep_module, "run_cell", calls.append)
        with pytest.raises(ValueError, match="unknown adaptation mode"):
            run_sweep(config, frozen_model, target_corpus, target_corpus, trials, modes=("vanilla", "fancy"))
        assert calls == []


class TestSmallData:
    def test_cells_use_small_data_schedule(self, config, frozen_model, target_corpus, trials, monkeypatch):
        seen = []

        def record(cell):
            seen.append(cell)
            return _fake_report(cell)

        monkeypatch.setattr(sweep_module, "run_cell", record)
        records, failures = run_small_data(config, frozen_model, target_corpus, target_corpus, trials)
        assert failures == []
        assert [(r.num_speakers, r.n) for r in records] == [(2, 0), (2, 160)]
        assert all(cell.cfg.small_data_mode and cell.cfg.epochs == 100 for cell in seen)
        assert all(len({u.speaker_id for u in cell.train_utts}) == 2 for cell in seen)
        assert seen[0].cfg.padding.l == 0

    def test_repeats_are_averaged(self, frozen_model, target_corpus, trials, monkeypatch):
        monkeypatch.setattr(sweep_module, "run_cell", _fake_report)
        cfg = tiny_config(padding={"l": 160, "k": 2})
        records, _ = run_small_data(cfg, frozen_model, target_corpus, target_corpus, trials, repeats=3)
        assert [r.repeats for r in records] == [3, 3]
        assert records[1].n == 80 and records[1].eer_percent == pytest.approx(8.0)
        assert records[1].eer_std == pytest.approx(0.0)


class TestCsv:
    def test_results_csv(self, tmp_path):
        report = EvalReport(eer_percent=12.5, threshold_at_eer=0.25, num_trials=8, mode="vanilla", n=80, l=160, k=2, seed=7)
        path = tmp_path / "results.csv"
        write_results_csv(path, [report])
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[1] == ["vanilla", "80", "160", "2", "mean_all", "12.5", "0.25", "8", "7"]

    def test_small_data_csv(self, tmp_path):
        path = tmp_path / "small_data.csv"
        write_small_data_csv(path, [SmallDataRecord("grad_est", 20, 3200, 10.0, 0.5, 5)])
        lines = path.read_text().splitlines()
        assert lines[0] == "mode,num_speakers,n,eer_percent,eer_std,repeats"
        assert lines[1] == "grad_est,20,3200,10.0,0.5,5"
