import json
from pathlib import Path
from typing import Any

import pandas as pd
import pytest
from typer.testing import CliRunner

from pynexus.checkpoint import save_checkpoint
from pynexus.cli import CHECKPOINT, cli_app
from pynexus.model import init_params
from pynexus.settings import load_run_config

COMMANDS = (
    "generate",
    "prepare",
    "train",
    "evaluate",
    "ablate",
    "analyze",
    "predict",
    "grid",
)

SMOKE_INI = """\
[run]
seed = 1

[synth]
n_days = 90

[split]
train_frac = 0.6
val_frac = 0.2

[model]
T = 16
p = 4
s = 2
r = 8
mix_rank = 4
d_hidden = 8
head_hidden = 8
fusion_hidden = 4

[train]
max_epochs = 2
patience = 1
batch_size = 32
"""

runner = CliRunner()


def invoke(*args: str | Path) -> tuple[int, str]:
    result = runner.invoke(cli_app, [str(arg) for arg in args])
    return result.exit_code, result.output


@pytest.fixture(scope="module")
def smoke_ini(tmp_path_factory: pytest.TempPathFactory) -> Path:
    path = tmp_path_factory.mktemp("config") / "smoke.ini"
    path.write_text(SMOKE_INI)
    return path


@pytest.fixture(scope="module")
def prepared_dir(smoke_ini: Path, tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Generated and prepared data with an untrained checkpoint."""
    out = tmp_path_factory.mktemp("prepared")
    code, output = invoke("generate", "-c", smoke_ini, "--out", out)
    assert code == 0, output
    code, output = invoke("prepare", "-c", smoke_ini, "--out", out)
    assert code == 0, output
    config = load_run_config(smoke_ini)
    save_checkpoint(out / CHECKPOINT, init_params(config.model, 0))
    return out


class TestHelp:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_help(self, command: str) -> None:
        code, output = invoke(command, "--help")
        assert code == 0
        assert "--config" in output


class TestExitCodes:
    def test_invalid_config(self, tmp_path: Path) -> None:
        code, output = invoke("generate", "--days", "10", "--out", tmp_path)
        assert code == 2
        assert "n_days" in output

    def test_missing_column(self, tmp_path: Path) -> None:
        raw = tmp_path / "raw.csv"
        raw.write_text("site_id,lat,lon,timestamp,co,no,so2,tp,ssr,u10,v10\n")
        code, output = invoke("prepare", "--raw", raw, "--out", tmp_path)
        assert code == 2
        assert "'skt'" in output

    def test_unknown_key(self, tmp_path: Path) -> None:
        code, _ = invoke("generate", "--set", "synth.colour=red", "--out", tmp_path)
        assert code == 2

    def test_unknown_grid_axis(self, smoke_ini: Path, prepared_dir: Path) -> None:
        code, output = invoke(
            "grid", "-c", smoke_ini, "--out", prepared_dir, "--axis", "width=1,2"
        )
        assert code == 2
        assert "width" in output

    def test_checkpoint_mismatch(self, smoke_ini: Path, prepared_dir: Path) -> None:
        code, _ = invoke(
            "predict",
            "-c",
            smoke_ini,
            "--out",
            prepared_dir,
            "--set",
            "model.d_hidden=16",
        )
        assert code == 3

    def test_site_count(self, smoke_ini: Path, prepared_dir: Path) -> None:
        code, output = invoke(
            "predict", "-c", smoke_ini, "--out", prepared_dir, "--set", "model.L=5"
        )
        assert code == 2
        assert "model.L=5" in output


class TestCommands:
    def test_generate(self, prepared_dir: Path) -> None:
        raw = pd.read_csv(prepared_dir / "raw.csv")
        assert len(raw) == 20 * 90 * 24
        assert (prepared_dir / "config.ini").exists()

    def test_prepare(self, prepared_dir: Path) -> None:
        for name in ("aligned.csv", "stats.json", "qc_report.json"):
            assert (prepared_dir / name).exists()

    def test_predict(self, smoke_ini: Path, prepared_dir: Path, tmp_path: Path) -> None:
        out = tmp_path / "forecast"
        out.mkdir()
        (out / CHECKPOINT).write_bytes((prepared_dir / CHECKPOINT).read_bytes())
        code, output = invoke(
            "predict", "-c", smoke_ini, "--out", out, "--data", prepared_dir
        )
        assert code == 0, output
        forecast = pd.read_csv(out / "forecast.csv")
        assert list(forecast.columns) == ["site_id", "timestamp", "co", "no", "so2"]
        assert list(forecast["site_id"]) == ["P0", "P1", "P2", "P3"]
        assert forecast["timestamp"].nunique() == 1

    def test_ablate_default_seeds(
        self,
        smoke_ini: Path,
        prepared_dir: Path,
        tmp_path: Path,
        monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        seen: list[int] = []

        def fake_ablation(*args: object, seeds: list[int], **kwargs: object) -> Any:
            seen.extend(seeds)
            return pd.DataFrame({"variant": ["full"], "val_r2": [0.5]})

        monkeypatch.setattr("pynexus.cli.run_ablation", fake_ablation)
        code, output = invoke(
            "ablate", "-c", smoke_ini, "--out", tmp_path, "--data", prepared_dir
        )
        assert code == 0, output
        assert seen == [1, 2, 3]
        assert (tmp_path / "ablation.csv").exists()

    def test_analyze(self, smoke_ini: Path, prepared_dir: Path, tmp_path: Path) -> None:
        code, output = invoke(
            "analyze", "-c", smoke_ini, "--out", tmp_path, "--data", prepared_dir
        )
        assert code == 0, output
        diurnal = pd.read_csv(tmp_path / "diurnal.csv")
        assert list(diurnal.columns) == ["bin", "co", "no", "so2", "composite"]
        assert len(diurnal) == 8
        monthly = pd.read_csv(tmp_path / "monthly.csv")
        assert len(monthly) == 12
        for name in ("regimes", "correlations", "composite", "spatial", "hotspots"):
            assert (tmp_path / f"{name}.csv").exists()


@pytest.mark.slow
def test_pipeline(smoke_ini: Path, tmp_path: Path) -> None:
    out = tmp_path / "run"
    steps = [
        ("generate",),
        ("prepare",),
        ("train", "--profile", tmp_path / "profile"),
        ("evaluate",),
        ("ablate", "--seeds", "1"),
        ("analyze",),
        ("predict",),
        ("grid", "--axis", "n_blocks=1,2"),
    ]
    for step in steps:
        code, output = invoke(*step, "-c", smoke_ini, "--out", out)
        assert code == 0, f"{step[0]}: {output}"
    for name in (
        CHECKPOINT,
        "train_history.csv",
        "train_summary.json",
        "metrics.csv",
        "baselines.csv",
        "residuals.csv",
        "ablation.csv",
        "forecast.csv",
        "grid.csv",
    ):
        assert (out / name).exists(), name
    assert len(pd.read_csv(out / "ablation.csv")) == 6
    baselines = pd.read_csv(out / "baselines.csv")
    assert set(baselines["model"]) == {"nexus", "persistence", "linear"}
    assert len(pd.read_csv(out / "grid.csv")) == 2
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["inference_ms"] > 0
    assert list((tmp_path / "profile").glob("*.html"))
