# tests/test_cli.py - Command line: simulate, fit, run, verify and report
import json

import pytest

from src.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from src.experiment import ExperimentConfig, load_experiment
from src.errors import ConfigurationError
from src.models.params import ModelKind


def write_config(path, **settings):
    path.write_text(json.dumps(settings, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def toy_config(tmp_path):
    """Fast toy experiment whose checks all pass"""
    return write_config(tmp_path / "toy.json", model="toy", sizes=[4], reps=5, seed=1, thetas=[[0.0]],
                        which=["W1"], checks=["unit_mean", "gradient", "kl_sup"],
                        output_dir=str(tmp_path / "results"))


# =============================================================================
# INTEGRATION TESTS
# =============================================================================


class TestSimulateAndFit:
    """simulate then fit"""

    def test_toy_pipeline(self, output_dir, capsys):
        data_path = output_dir / "toy.csv"
        assert main(["simulate", "--model", "toy", "--N", "5", "--seed", "3", "--out", str(data_path)]) == EXIT_OK
        assert data_path.exists() and data_path.with_suffix(".json").exists()
        capsys.readouterr()
        assert main(["fit", "--model", "toy", "--data", str(data_path), "--starts", "2"]) == EXIT_OK
        document = json.loads((output_dir / "toy_fit.json").read_text())
        assert document["converged"] is True
        assert document["model"] == "toy"
        assert json.loads(capsys.readouterr().out) == document

    def test_odd_size_is_invalid(self, output_dir, capsys):
        code = main(["simulate", "--model", "lmm", "--N", "3", "--out", str(output_dir / "lmm.csv")])
        assert code == EXIT_INVALID
        assert "error:" in capsys.readouterr().err

    def test_missing_data(self, output_dir):
        assert main(["fit", "--model", "toy", "--data", str(output_dir / "absent.csv")]) == EXIT_INVALID

    def test_model_mismatch(self, output_dir):
        data_path = output_dir / "toy.csv"
        main(["simulate", "--model", "toy", "--N", "3", "--out", str(data_path)])
        assert main(["fit", "--model", "lmm", "--data", str(data_path)]) == EXIT_INVALID


class TestRun:
    """run and report"""

    def test_run_writes_reports_and_summary(self, toy_config, tmp_path, capsys):
        assert main(["run", str(toy_config)]) == EXIT_OK
        results = tmp_path / "results"
        names = sorted(path.stem for path in results.glob("*.json"))
        assert names == ["gradient", "kl_sup_A1_eps0.5", "kl_sup_A2_eps0.5", "summary", "unit_mean_W1_0"]
        assert "PASS gradient" in capsys.readouterr().out
        summary = json.loads((results / "summary.json").read_text())
        assert summary["passed"] is True and summary["count"] == 4

    def test_output_independent_of_workers(self, tmp_path):
        config = write_config(tmp_path / "exceed.json", model="toy", sizes=[4, 8], reps=10, seed=3,
                              checks=["exceedance", "unit_mean"])
        main(["run", str(config), "--workers", "1", "--output-dir", str(tmp_path / "one")])
        main(["run", str(config), "--workers", "2", "--output-dir", str(tmp_path / "two")])
        first = sorted((tmp_path / "one").iterdir())
        second = sorted((tmp_path / "two").iterdir())
        assert [path.name for path in first] == [path.name for path in second]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))

    def test_unknown_key(self, tmp_path, capsys):
        config = write_config(tmp_path / "bad.json", model="toy", sizes=[4], checks=["gradient"], colour="red")
        assert main(["run", str(config)]) == EXIT_INVALID
        assert "colour" in capsys.readouterr().err

    def test_syntax_error_reports_line(self, tmp_path, capsys):
        config = tmp_path / "broken.json"
        config.write_text('{\n  "model": "toy",\n  "sizes": [4,,]\n}\n', encoding="utf-8")
        assert main(["run", str(config)]) == EXIT_INVALID
        assert "line 3" in capsys.readouterr().err

    def test_report(self, toy_config, tmp_path, capsys):
        main(["run", str(toy_config)])
        capsys.readouterr()
        assert main(["report", str(tmp_path / "results")]) == EXIT_OK
        assert "PASS gradient gradient.json" in capsys.readouterr().out

    def test_report_missing_directory(self, tmp_path):
        assert main(["report", str(tmp_path / "absent")]) == EXIT_INVALID


class TestVerify:
    """verify runs one named check"""

    def test_prints_report(self, capsys):
        assert main(["verify", "--check", "gradient", "--model", "toy", "--sizes", "4"]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["check"] == "gradient"
        assert document["passed"] is True

    def test_rate_condition_pulls_in_its_fits(self, tmp_path, capsys):
        code = main(["verify", "--check", "rate_condition", "--model", "toy", "--sizes", "8", "64",
                     "--reps", "50", "--which", "W1", "--output-dir", str(tmp_path / "rc")])
        assert code in (EXIT_OK, EXIT_FAILED)
        names = sorted(path.stem for path in (tmp_path / "rc").glob("*.json"))
        assert names == ["rate_condition_W1"]

    def test_grid_growth(self, capsys):
        assert main(["verify", "--check", "grid_growth", "--model", "toy", "--sizes", "4"]) == EXIT_OK
        document = json.loads(capsys.readouterr().out)
        assert document["details"]["extra"]["counts"] == [2, 2]

    def test_model_disagrees_with_config(self, toy_config):
        assert main(["verify", "--check", "gradient", "--model", "lmm", "--config", str(toy_config)]) == EXIT_INVALID


class TestExperimentConfig:
    """Validation of experiment files"""

    def test_defaults(self, toy_config):
        cfg = load_experiment(toy_config)
        assert cfg.model is ModelKind.TOY
        assert cfg.name == "toy"
        assert cfg.mesh(0.5) == 0.25
        assert cfg.c_values == [1.0, 2.0]

    @pytest.mark.parametrize("raw,field", [
        ({"model": "toy", "sizes": [4]}, "checks"),
        ({"model": "toy", "sizes": [4], "checks": ["nope"]}, "checks"),
        ({"model": "lmm", "sizes": [3], "checks": ["gradient"]}, "sizes"),
        ({"model": "lmm", "sizes": [4], "checks": ["gradient"], "epsilon": 0.9}, "epsilon"),
        ({"model": "toy", "sizes": [4], "checks": ["gradient"], "reps": True}, "reps"),
        ({"model": "toy", "sizes": [4], "checks": ["gradient"], "theta0": [0.0, 1.0]}, "theta0"),
        ({"model": "mixed", "sizes": [4], "checks": ["gradient"]}, "model"),
        ({"model": "toy", "sizes": [4], "checks": ["grid_growth"], "growth_deltas": [0.1]}, "growth_deltas"),
    ])
    def test_rejected(self, raw, field):
        with pytest.raises(ConfigurationError) as excinfo:
            ExperimentConfig.from_dict(raw)
        assert excinfo.value.field == field
