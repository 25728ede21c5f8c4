"""
コマンドライン（サブコマンド一式）の結合テスト
"""
import json

import pytest

from decode.main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from decode.testutil import tiny_config
from decode.utils.storage import load_json, save_json


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    save_json(path, tiny_config().echo())
    return path


def _run(config_file, out, *args):
    return main([*args, "--config", str(config_file), "--out", str(out)])


@pytest.mark.slow
def test_full_pipeline(config_file, tmp_path):
    out = tmp_path / "run"
    assert _run(config_file, out, "gen-data") == EXIT_OK
    for name in ("arc", "straight", "turn", "aggressive-arc", "mix"):
        assert (out / "data" / f"{name}.ds").exists()
    assert _run(config_file, out, "pretrain") == EXIT_OK
    assert (out / "logs" / "train_phase0.csv").exists()
    for m in (1, 2):
        assert _run(config_file, out, "expand", "--phase", str(m)) == EXIT_OK
        assert (out / "checkpoints" / f"phase{m}.ckpt").exists()

    assert _run(config_file, out, "eval", "--phase", "2") == EXIT_OK
    report = load_json(out / "reports" / "eval_phase2.json")
    assert report["domains"] == ["arc", "straight"]
    assert sum(len(row) for row in report["staircase"]["min_ade"]) == 3
    assert {b["method"] for b in report["baselines"]} == {"naive-finetune", "frozen-generalized",
                                                          "experience-replay"}
    assert report["config"]["seed"] == tiny_config().seed
    assert (out / "reports" / "roc_phase2.csv").exists()
    assert _run(config_file, out, "eval", "--phase", "2", "--no-baselines", "--seed", "5") == EXIT_OK
    assert load_json(out / "reports" / "eval_phase2.json")["config"]["seed"] == 5

    scene_id = f"straight-{tiny_config().seed}-000003"
    assert _run(config_file, out, "predict", "--scene", scene_id) == EXIT_OK
    pred = load_json(out / "reports" / f"predict_{scene_id}.json")
    assert set(pred["log_evidence"]) == {"1", "2"}
    assert sum(pred["weight_split"].values()) == pytest.approx(1.0)

    assert _run(config_file, out, "ablate-e0") == EXIT_OK
    assert (out / "reports" / "ablate_e0.csv").exists()
    assert _run(config_file, out, "report") == EXIT_OK
    assert (out / "reports" / "report.pdf").read_bytes().startswith(b"%PDF")


def test_gen_data_is_reproducible(config_file, tmp_path):
    assert _run(config_file, tmp_path / "a", "gen-data") == EXIT_OK
    assert _run(config_file, tmp_path / "b", "gen-data") == EXIT_OK
    a = load_json(tmp_path / "a" / "data" / "manifest.json")
    b = load_json(tmp_path / "b" / "data" / "manifest.json")
    assert a["digests"] == b["digests"]
    assert sum(a["mix_counts"].values()) == tiny_config().data.n_pretrain


def test_missing_checkpoint_fails_with_hint(config_file, tmp_path, capsys):
    assert _run(config_file, tmp_path, "expand", "--phase", "1") == EXIT_FAILED
    assert "pretrain" in capsys.readouterr().err


def test_invalid_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    data = tiny_config().echo()
    data["model"]["n_heads"] = 4
    bad.write_text(json.dumps(data), encoding="utf-8")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "n_heads" in capsys.readouterr().err


def test_phase_must_be_positive(config_file, tmp_path):
    assert _run(config_file, tmp_path, "eval", "--phase", "0") == EXIT_USAGE
