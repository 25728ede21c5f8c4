"""
レポート出力のテスト
"""
import pytest

from decode.services.metrics import ResultMatrix
from decode.services.report_service import collect_summary, write_eval_report, write_summary
from decode.testutil import tiny_config
from decode.utils.storage import load_json


def _eval_report(reports_dir):
    ade = ResultMatrix.from_rows([[1.0, 1.2], [0.8]])
    fde = ResultMatrix.from_rows([[2.0, 2.5], [1.6]])
    advisory = [{"domain": "arc", "generalized_ade": 1.1, "specialized_ade": 1.0, "expand": False}]
    return write_eval_report(reports_dir, 2, ["arc", "straight"], ade, fde, None, [], advisory,
                             tiny_config().echo())


def test_eval_report_contents(tmp_path):
    report = load_json(_eval_report(tmp_path))
    assert report["aer"]["min_ade"] == pytest.approx(1.0)
    assert report["fgt"]["min_ade"] == pytest.approx(0.2)
    assert (tmp_path / "staircase_phase2.csv").exists()
    assert not (tmp_path / "roc_phase2.csv").exists()


def test_summary_is_byte_identical_across_runs(tmp_path):
    _eval_report(tmp_path)
    paths = write_summary(tmp_path)
    first = (paths["pdf"].read_bytes(), paths["json"].read_bytes())
    paths = write_summary(tmp_path)
    assert (paths["pdf"].read_bytes(), paths["json"].read_bytes()) == first
    assert first[0].startswith(b"%PDF")


def test_summary_requires_eval_reports(tmp_path):
    with pytest.raises(FileNotFoundError):
        collect_summary(tmp_path)
