"""
継続学習（拡張フェーズ・評価・ベースライン・チェックポイント）のテスト
"""
import numpy as np
import pytest

from decode.errors import (
    CheckpointCorruptedError, CheckpointError, DatasetFormatError, PhaseOrderError, TrainingDivergedError,
    UnsupportedVersionError,
)
from decode.services import prednet
from decode.services.adcore import as_tensor
from decode.services.contlearn import (
    Framework, ReservoirBuffer, ablate_e0, build_plan, checkpoint_digest, decode_checkpoint, domain_awareness,
    encode_checkpoint, evaluate_staircase, expansion_advisory, expansion_loss_parts, load_checkpoint,
    load_domain_split, prepare, run_baseline, run_expansion, run_pretrain, save_checkpoint,
)
from decode.services.fuse import predict
from decode.services.hyper import add_query, output_drift
from decode.services.metrics import fgt
from decode.services.scenegen import write_dataset
from decode.testutil import domain_scenes


@pytest.fixture(scope="module")
def val_sets(config):
    return [domain_scenes(config, name, 30, seed_offset=1) for name in ("arc", "straight")]


def test_loss_parts_add_up(phase1, config):
    fw = phase1
    hyper = fw.hyper.copy()
    query = add_query(hyper, np.random.default_rng(0))
    trial = Framework(config=fw.config, encoder=fw.encoder, generalized=fw.generalized, anchors=fw.anchors,
                     hyper=hyper)
    parts = expansion_loss_parts(trial, query, prepare(trial, domain_scenes(config, "straight", 16)))
    expected = (parts.bayes.item() + parts.regression.item() + config.loss.beta_domain * parts.domain.item()
                + parts.reg.item())
    assert parts.total.item() == pytest.approx(expected, abs=1e-12)
    assert parts.reg.item() == 0.0


def test_expansion_leaves_input_untouched(pretrained, phase1, phase2):
    assert pretrained.phase == 0 and phase1.phase == 1 and phase2.phase == 2
    assert "phase1" in phase1.logs and "phase2" not in phase1.logs
    assert [q.query_id for q in phase2.hyper.finalized] == [1, 2]
    np.testing.assert_array_equal(phase2.hyper.query(1).q.values, phase1.hyper.query(1).q.values)
    np.testing.assert_array_equal(phase2.encoder.numpy(), pretrained.encoder.numpy())
    for t, ref in phase1.hyper.stored_targets[1].items():
        np.testing.assert_array_equal(phase2.hyper.reference_targets[1][t], ref)


@pytest.mark.parametrize("fixture", ["phase2", "phase3"])
def test_earlier_queries_keep_their_parameters(request, fixture):
    fw = request.getfixturevalue(fixture)
    drift = output_drift(fw.hyper)
    assert sorted(drift) == list(range(1, fw.phase + 1))
    assert max(drift.values()) < 1e-2


def test_expansion_phase_order(pretrained, phase1, config):
    scenes = domain_scenes(config, "turn", 8)
    with pytest.raises(PhaseOrderError):
        run_expansion(pretrained, scenes, 2)
    with pytest.raises(PhaseOrderError):
        run_expansion(phase1, scenes, 1)


def test_expansion_logs_every_epoch(phase1, config):
    rows = phase1.logs["phase1"]
    assert [r["epoch"] for r in rows] == list(range(config.optim.expand_epochs))
    assert all("wall_time" not in r for r in rows)


def test_staircase_is_complete(phase1, phase2, val_sets):
    ade, fde = evaluate_staircase([phase1, phase2], val_sets)
    ade.check_complete()
    assert len(ade.values) == 3 and len(fde.values) == 3
    assert all(v >= 0 for v in ade.values.values())


def test_domain_awareness_report(phase2, val_sets):
    report = domain_awareness(phase2, val_sets)
    assert set(report["flows"]) <= {1, 2}
    for res in report["flows"].values():
        assert 0.0 <= res["auroc"] <= 1.0
        assert res["roc"][0][:2] == (0.0, 0.0)
    conf = report["confusion"]
    assert sum(map(sum, conf["matrix"])) == 60
    assert 0.0 <= conf["accuracy"] <= 1.0


def test_frozen_baseline_never_forgets(pretrained, config, val_sets):
    res = run_baseline("frozen-generalized", pretrained, [], val_sets)
    assert fgt(res.ade) == 0.0 and fgt(res.fde) == 0.0
    assert res.summary()["method"] == "frozen-generalized"


@pytest.mark.parametrize("kind", ["naive-finetune", "experience-replay"])
def test_trained_baselines_fill_staircase(pretrained, config, val_sets, kind):
    train = [domain_scenes(config, name, 40, seed_offset=3) for name in ("arc", "straight")]
    res = run_baseline(kind, pretrained, train, val_sets)
    res.ade.check_complete()
    assert np.isfinite(res.summary()["aer_ade"])


def test_baseline_follows_explicit_seed(pretrained, config, val_sets):
    train = [domain_scenes(config, "arc", 40, seed_offset=3)]
    first = run_baseline("naive-finetune", pretrained, train, val_sets[:1])
    again = run_baseline("naive-finetune", pretrained, train, val_sets[:1], config)
    other = run_baseline("naive-finetune", pretrained, train, val_sets[:1], config.model_copy(update={"seed": 99}))
    assert first.ade.values == again.ade.values
    assert other.ade.values != first.ade.values


def test_unknown_baseline(pretrained, val_sets):
    with pytest.raises(ValueError):
        run_baseline("ewc", pretrained, [], val_sets)


def test_reservoir_buffer_is_bounded():
    buf = ReservoirBuffer(5, np.random.default_rng(0))
    for k in range(50):
        buf.add(np.full(2, k), np.zeros((3, 2)))
    assert len(buf) == 5 and buf.seen == 50
    h, fut = buf.sample(8)
    assert h.shape == (8, 2) and fut.shape == (8, 3, 2)
    with pytest.raises(ValueError):
        ReservoirBuffer(0, np.random.default_rng(0))


def test_ablation_rows(phase1, config, val_sets):
    grid = [0.1, 10.0]
    rows = ablate_e0(phase1, {"arc": val_sets[0][:10]}, grid)
    assert [r["e0"] for r in rows] == ["generalized", 0.1, 10.0, "none"]
    assert all(r["min_ade"] >= 0 for r in rows)


def test_advisory_without_expansion(pretrained, val_sets):
    rows = expansion_advisory(pretrained, {"arc": val_sets[0]}, 0.0)
    assert rows[0]["specialized_ade"] is None
    assert rows[0]["expand"] is True


def test_checkpoint_round_trip(phase2, config, tmp_path):
    path = tmp_path / "phase2.ckpt"
    digest = save_checkpoint(phase2, path)
    loaded = load_checkpoint(path)
    assert checkpoint_digest(loaded) == digest == checkpoint_digest(phase2)
    assert loaded.config == phase2.config
    scene = domain_scenes(config, "straight", 1, seed_offset=21)[0]
    np.testing.assert_array_equal(predict(scene, loaded).trajectories, predict(scene, phase2).trajectories)


def test_checkpoint_corruption_reports_offset(phase1):
    data = bytearray(encode_checkpoint(phase1))
    pos = len(data) - 3
    data[pos] ^= 0xFF
    with pytest.raises(CheckpointCorruptedError) as info:
        decode_checkpoint(bytes(data))
    assert 0 < info.value.offset <= pos


def test_checkpoint_version_and_magic(phase1):
    data = encode_checkpoint(phase1)
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(data.replace(b'"version":1', b'"version":2', 1))
    with pytest.raises(CheckpointError):
        decode_checkpoint(data.replace(b"DECODE-CKPT", b"OTHER-CKPT!", 1))
    with pytest.raises(CheckpointCorruptedError):
        decode_checkpoint(data[:-100])


def test_plan_and_split_loading(config, tmp_path):
    with pytest.raises(FileNotFoundError):
        build_plan(config, tmp_path)
    for name in config.plan.phases:
        scenes = domain_scenes(config, name, 6)
        write_dataset(scenes, tmp_path / f"{name}.ds", splits={"train": 4, "val": 2})
    plan = build_plan(config, tmp_path)
    assert plan.entry(2).domain == config.plan.phases[1]
    with pytest.raises(PhaseOrderError):
        plan.entry(len(config.plan.phases) + 1)
    assert len(load_domain_split(tmp_path, "arc", "val")) == 2
    with pytest.raises(DatasetFormatError):
        load_domain_split(tmp_path, "arc", "test")


def test_divergence_saves_last_good_state(config, mix, tmp_path, monkeypatch):
    real = prednet.motion_loss
    calls = {"n": 0}
    per_epoch = -(-len(mix) // config.optim.batch_size)

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > per_epoch:
            return as_tensor(float("nan"))
        return real(*args, **kwargs)

    monkeypatch.setattr(prednet, "motion_loss", flaky)
    out = tmp_path / "phase0.ckpt"
    with pytest.raises(TrainingDivergedError):
        run_pretrain(config, mix, out)
    assert not out.exists()
    saved = load_checkpoint(tmp_path / "phase0.lastgood.ckpt")
    assert saved.phase == 0
