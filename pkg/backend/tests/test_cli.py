import json
from pathlib import Path

import pytest
from loguru import logger

import main as cli
from conftest import tiny_config
from services import sweep as sweep_module


def _run(*args) -> int:
    return cli.main([str(a) for a in args])


def write_config(path: Path, with_seed: bool = False, **overrides) -> Path:
    """把小配方写成 dotenv 文件：每个顶层字段一行 JSON。"""
    snapshot = tiny_config(**overrides).model_dump(mode="json")
    if not with_seed:
        snapshot.pop("seed")
    lines = [f"{key.upper()}='{json.dumps(value)}'" for key, value in snapshot.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data → pretrain → adapt，整个模块共用一次。"""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "root": root,
        "config": write_config(root / "tiny.env"),
        "data": root / "data",
        "model_run": root / "model",
        "adapt_run": root / "adapt",
    }
    assert _run("gen-data", "--config", paths["config"], "--out", paths["data"], "--seed", 7) == 0
    assert _run(
        "pretrain", "--config", paths["config"], "--out", paths["model_run"], "--seed", 7, "--data", paths["data"]
    ) == 0
    paths["model"] = paths["model_run"] / "model.npz"
    assert _run(
        "adapt", "--config", paths["config"], "--out", paths["adapt_run"], "--seed", 7,
        "--data", paths["data"], "--model", paths["model"], "--mode", "vanilla",
    ) == 0
    paths["padding"] = paths["adapt_run"] / "padding.npz"
    return paths


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    logger.remove()


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


class TestPipeline:
    def test_gen_data_layout(self, pipeline):
        data = pipeline["data"]
        for split in ("source_train", "source_eval", "target_train", "target_eval"):
            assert (data / "corpus" / f"{split}.lst").is_file()
        assert len((data / "trials" / "target_eval.txt").read_text().splitlines()) == 8
        manifest = _manifest(data)
        assert manifest["command"] == "gen-data" and manifest["seed"] == 7
        assert manifest["config"]["padding"]["l"] == 160

    def test_pretrain_outputs(self, pipeline):
        run = pipeline["model_run"]
        assert pipeline["model"].is_file()
        epochs = (run / "train.log").read_text().splitlines()
        assert len(epochs) == 2 and epochs[0].startswith("epoch=1 loss=")
        assert "Command pretrain started" in (run / "run.log").read_text()
        assert _manifest(run)["outputs"]["model"] == str(pipeline["model"])

    def test_adapt_records_mode(self, pipeline):
        manifest = _manifest(pipeline["adapt_run"])
        assert manifest["options"] == {"mode": "vanilla"}
        assert manifest["config"]["mode"] == "adapt_vanilla"
        assert manifest["inputs"]["model"] == str(pipeline["model"])

    def test_eval_with_padding(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        code = _run(
            "eval", "--config", pipeline["config"], "--out", out, "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--padding", pipeline["padding"],
        )
        assert code == 0
        assert "vanilla n=160 l=160 k=1" in capsys.readouterr().out
        assert len((out / "scores.txt").read_text().splitlines()) == 8
        rows = (out / "results.csv").read_text().splitlines()
        assert rows[0] == "mode,n,l,k,score_mode,eer_percent,threshold,num_trials,seed"
        assert rows[1].startswith("vanilla,160,160,1,mean_all,")

    def test_eval_baseline_on_source_split(self, pipeline, tmp_path, capsys):
        code = _run(
            "eval", "--config", pipeline["config"], "--out", tmp_path / "eval", "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--split", "source_eval",
        )
        assert code == 0
        assert "none n=0 l=0 k=1" in capsys.readouterr().out

    def test_manifest_replay_is_bit_identical(self, pipeline, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert _run(
            "eval", "--config", pipeline["config"], "--out", first, "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--padding", pipeline["padding"],
        ) == 0
        assert _run("eval", "--out", second, "--from-manifest", first / "manifest.json") == 0
        assert (first / "scores.txt").read_bytes() == (second / "scores.txt").read_bytes()
        assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()

    def test_gen_data_is_deterministic(self, pipeline, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        for out in (first, second):
            assert _run("gen-data", "--config", pipeline["config"], "--out", out, "--seed", 7) == 0
        for name in ("corpus/source_train.lst", "corpus/target_eval.lst", "trials/target_eval.txt"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        wavs = sorted(p.relative_to(first) for p in (first / "wav").rglob("*.wav"))
        assert wavs and all((first / p).read_bytes() == (second / p).read_bytes() for p in wavs)
        manifests = [_manifest(out) for out in (first, second)]
        for manifest, out in zip(manifests, (first, second)):
            manifest["outputs"] = {k: str(Path(v).relative_to(out)) for k, v in manifest["outputs"].items()}
        assert manifests[0] == manifests[1]

    def test_sweep_manifest_replay_is_bit_identical(self, pipeline, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert _run(
            "sweep", "--config", pipeline["config"], "--out", first, "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--mode", "vanilla",
        ) == 0
        assert _run("sweep", "--out", second, "--from-manifest", first / "manifest.json") == 0
        assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()

    def test_sweep_and_report(self, pipeline, tmp_path, capsys):
        sweep_dir, report_dir = tmp_path / "sweep", tmp_path / "report"
        code = _run(
            "sweep", "--config", pipeline["config"], "--out", sweep_dir, "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--mode", "vanilla",
        )
        assert code == 0
        assert len((sweep_dir / "results.csv").read_text().splitlines()) == 3
        capsys.readouterr()
        assert _run("report", "--out", report_dir, "--seed", 7, "--csv", sweep_dir / "results.csv") == 0
        assert "# Reprogramming results" in capsys.readouterr().out
        assert (report_dir / "plot_vanilla.dat").read_text().startswith("n eer_percent\n")


class TestExitCodes:
    def test_missing_seed(self, tmp_path):
        config = write_config(tmp_path / "tiny.env")
        assert _run("gen-data", "--config", config, "--out", tmp_path / "data") == 1

    def test_seed_from_config_file(self, tmp_path):
        config = write_config(tmp_path / "tiny.env", with_seed=True)
        assert _run("gen-data", "--config", config, "--out", tmp_path / "data") == 0
        assert _manifest(tmp_path / "data")["seed"] == 7

    def test_missing_config_file(self, tmp_path):
        assert _run("gen-data", "--config", tmp_path / "nope.env", "--out", tmp_path / "data", "--seed", 1) == 1

    def test_existing_run_directory_needs_force(self, pipeline, tmp_path):
        out = tmp_path / "eval"
        args = ["eval", "--config", pipeline["config"], "--out", out, "--seed", 7,
                "--data", pipeline["data"], "--model", pipeline["model"]]
        assert _run(*args) == 0
        assert _run(*args) == 1
        assert _run(*args, "--force") == 0

    def test_missing_required_flag(self, pipeline, tmp_path):
        assert _run("pretrain", "--config", pipeline["config"], "--out", tmp_path / "run", "--seed", 7) == 1

    def test_malformed_override(self, pipeline, tmp_path):
        assert _run("gen-data", "--config", pipeline["config"], "--out", tmp_path / "d", "--seed", 7, "--set", "EPOCHS") == 1

    def test_invalid_override_value(self, pipeline, tmp_path):
        code = _run(
            "gen-data", "--config", pipeline["config"], "--out", tmp_path / "d", "--seed", 7, "--set", "PADDING__K=3"
        )
        assert code == 1

    def test_wrong_checkpoint_kind(self, pipeline, tmp_path):
        code = _run(
            "eval", "--config", pipeline["config"], "--out", tmp_path / "eval", "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["padding"],
        )
        assert code == 1

    def test_runtime_failure(self, pipeline, tmp_path, monkeypatch):
        def boom(self):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(cli.ReprogramExperiment, "gen_data", boom)
        assert _run("gen-data", "--config", pipeline["config"], "--out", tmp_path / "d", "--seed", 7) == 2

    def test_partial_sweep(self, pipeline, tmp_path, monkeypatch):
        real = sweep_module.run_cell

        def flaky(cell):
            if cell.n > 0:
                raise RuntimeError("diverged")
            return real(cell)

        monkeypatch.setattr(sweep_module, "run_cell", flaky)
        code = _run(
            "sweep", "--config", pipeline["config"], "--out", tmp_path / "sweep", "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--mode", "vanilla",
        )
        assert code == 3
        assert len((tmp_path / "sweep" / "results.csv").read_text().splitlines()) == 2

    def test_every_sweep_cell_failing(self, pipeline, tmp_path, monkeypatch):
        def broken(cell):
            raise RuntimeError("diverged")

        monkeypatch.setattr(sweep_module, "run_cell", broken)
        code = _run(
            "sweep", "--config", pipeline["config"], "--out", tmp_path / "sweep", "--seed", 7,
            "--data", pipeline["data"], "--model", pipeline["model"], "--mode", "vanilla",
        )
        assert code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["--version"])
        assert excinfo.value.code == 0
        assert "reprog" in capsys.readouterr().out
