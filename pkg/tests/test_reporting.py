# tests/test_reporting.py - Dataset files, report serialization and run summaries
import csv
import json

import numpy as np
import pytest

from src.errors import ConfigurationError, ContractError
from src.models.params import ModelKind, ToyParams
from src.models.toy import simulate_toy
from src.reporting.datasets import read_dataset, sidecar_path, write_dataset
from src.reporting.formatter import (SCHEMA_VERSION, collate_reports, format_json, rate_fit_report,
                                     report_rows, write_report)
from src.verify.rates import RateFit


def report(check, passed, **details):
    return {"check": check, "model": "toy", "passed": passed, "details": details, "warnings": []}


# =============================================================================
# UNIT TESTS
# =============================================================================


class TestDatasets:
    """CSV datasets with JSON sidecars"""

    def test_lmm_round_trip(self, lmm_data, lmm_theta0, output_dir):
        csv_path, meta_path = write_dataset(output_dir / "lmm.csv", lmm_data, lmm_theta0, seed=11)
        assert meta_path == output_dir / "lmm.json"
        data, sidecar = read_dataset(csv_path)
        assert np.array_equal(data.y, lmm_data.y)
        assert sidecar["model"] is ModelKind.LMM
        assert (sidecar["N"], sidecar["T"], sidecar["seed"]) == (4, 4, 11)

    def test_lmm_header(self, lmm_data, lmm_theta0, output_dir):
        csv_path, _ = write_dataset(output_dir / "lmm.csv", lmm_data, lmm_theta0)
        with csv_path.open(newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["i", "j", "t", "y"]
        assert rows[1][:3] == ["1", "1", "1"]
        assert len(rows) == 1 + 64

    def test_mglmm_round_trip(self, mglmm_data, mglmm_theta0, output_dir):
        csv_path, _ = write_dataset(output_dir / "mglmm.csv", mglmm_data, mglmm_theta0, seed=12)
        data, sidecar = read_dataset(csv_path)
        assert np.array_equal(data.y1, mglmm_data.y1)
        assert np.array_equal(data.y2, mglmm_data.y2)
        assert np.array_equal(data.design.x, mglmm_data.design.x)
        assert sidecar["p"] == 2

    def test_toy_round_trip(self, output_dir):
        matrix = simulate_toy(0.0, 3, seed=4)
        csv_path, _ = write_dataset(output_dir / "toy.csv", matrix, ToyParams(0.0), seed=4)
        data, sidecar = read_dataset(csv_path)
        assert np.array_equal(data, matrix)
        assert sidecar["schema_version"] == SCHEMA_VERSION

    def test_theta_must_match_data(self, lmm_data, output_dir):
        with pytest.raises(ContractError):
            write_dataset(output_dir / "lmm.csv", lmm_data, ToyParams(0.0))

    def test_missing_sidecar(self, output_dir):
        (output_dir / "orphan.csv").write_text("i,j,y\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            read_dataset(output_dir / "orphan.csv")

    def test_wrong_schema_version(self, output_dir):
        csv_path, meta_path = write_dataset(output_dir / "toy.csv", simulate_toy(0.0, 2, 0), ToyParams(0.0))
        sidecar = json.loads(meta_path.read_text())
        sidecar["schema_version"] = 99
        meta_path.write_text(json.dumps(sidecar))
        with pytest.raises(ConfigurationError) as excinfo:
            read_dataset(csv_path)
        assert excinfo.value.field == "schema_version"

    def test_missing_rows(self, output_dir):
        csv_path, _ = write_dataset(output_dir / "toy.csv", simulate_toy(0.0, 3, 0), ToyParams(0.0))
        lines = csv_path.read_text().splitlines()
        csv_path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ConfigurationError):
            read_dataset(csv_path)

    def test_wrong_header(self, output_dir):
        csv_path, _ = write_dataset(output_dir / "toy.csv", simulate_toy(0.0, 2, 0), ToyParams(0.0))
        lines = csv_path.read_text().splitlines()
        csv_path.write_text("\n".join(["row,col,value"] + lines[1:]) + "\n")
        with pytest.raises(ConfigurationError) as excinfo:
            read_dataset(csv_path)
        assert excinfo.value.line == 1

    def test_sidecar_path(self, output_dir):
        assert sidecar_path(output_dir / "a.csv").name == "a.json"


class TestFormatter:
    """JSON and CSV report documents"""

    def test_json_is_sorted_and_versioned(self):
        text = format_json({"b": np.float64(1.5), "a": [np.int64(2), np.nan], "c": np.bool_(True)})
        document = json.loads(text)
        assert list(document) == ["a", "b", "c", "schema_version"]
        assert document["a"] == [2, None]
        assert document["c"] is True
        assert document["schema_version"] == SCHEMA_VERSION
        assert text.endswith("\n")

    def test_enum_values(self):
        assert json.loads(format_json({"model": ModelKind.LMM}))["model"] == "lmm"

    def test_rows_flatten_details(self):
        rows = report_rows(report("kl_sup", True, sup=-0.1, sizes=[4, 8], subset={"which": "A1"}))
        metrics = {row["metric"]: row["value"] for row in rows}
        assert metrics == {"sizes[0]": 4, "sizes[1]": 8, "sup": -0.1, "subset.which": "A1"}
        assert all(row["check"] == "kl_sup" for row in rows)

    def test_rate_fit_report(self):
        fit = RateFit(xs=[1.0, 2.0], ys=[0.0, -1.0], slope=-1.0, intercept=1.0, slope_ci=(-1.0, -1.0),
                      axes="log-linear", passed=True,
                      extra={"check": "identification_rate", "model": "lmm", "which": "W1"})
        document = rate_fit_report(fit)
        assert document["check"] == "identification_rate"
        assert document["passed"] is True
        assert document["details"]["slope"] == -1.0
        assert document["details"]["extra"] == {"which": "W1"}

    def test_write_report(self, output_dir):
        json_path, csv_path = write_report(output_dir, "gradient", report("gradient", True, max_rel_err=1e-9))
        assert json.loads(json_path.read_text())["check"] == "gradient"
        with csv_path.open(newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert rows == [{"check": "gradient", "model": "toy", "passed": "True", "metric": "max_rel_err",
                         "value": "1e-09"}]


class TestCollate:
    """Run summaries"""

    def test_summary(self, output_dir):
        write_report(output_dir, "gradient", report("gradient", True, max_rel_err=1e-9))
        write_report(output_dir, "unit_mean_W1_0", report("unit_mean", False, mean=1.4))
        (output_dir / "notes.json").write_text(json.dumps({"comment": "not a report"}))
        summary = collate_reports(output_dir)
        assert summary["count"] == 2
        assert summary["passed"] is False
        assert [row["file"] for row in summary["reports"]] == ["gradient.json", "unit_mean_W1_0.json"]
        assert summary["reports"][1]["headline"] == 1.4
        assert (output_dir / "summary.csv").read_text().splitlines()[0] == "file,check,model,passed,headline"

    def test_summary_is_idempotent(self, output_dir):
        write_report(output_dir, "gradient", report("gradient", True, max_rel_err=1e-9))
        first = collate_reports(output_dir)
        assert collate_reports(output_dir) == first

    def test_invalid_report(self, output_dir):
        (output_dir / "broken.json").write_text("{\n  \"check\": \n")
        with pytest.raises(ConfigurationError) as excinfo:
            collate_reports(output_dir)
        assert excinfo.value.line is not None

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigurationError):
            collate_reports(tmp_path / "absent")
