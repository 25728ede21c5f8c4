"""
ハイパーネットワーク（クエリ・チャンク生成・出力正則化・フェーズ確定）のテスト
"""
import numpy as np
import pytest

from decode.errors import ManifestMismatchError, PhaseAlreadyFinalizedError, PhaseOrderError
from decode.models import manifest_size
from decode.services import adcore as ad
from decode.services.flow import FlowSpec
from decode.services.hyper import (
    add_query, build_hypernet, finalize_phase, generate_numpy, hypernet_forward, mip_transform, output_drift,
    principled_init,
    reg_loss, trainable_params,
)
from decode.services.prednet import decoder_manifest


def _state(seed=0, trunk_hidden=(12,)):
    rng = np.random.default_rng(seed)
    return build_hypernet(decoder_manifest(4, 3, 5), FlowSpec(4, n_layers=2, hidden=4).manifest(),
                          d_q=4, d_b=3, trunk_hidden=list(trunk_hidden), chunk_dec=16, chunk_flow=16, rng=rng)


def test_mip_transform_zero_query():
    out = mip_transform(np.zeros(2))
    np.testing.assert_allclose(out.values, np.array([1.0, 1.0, 0.0, 0.0]) / np.sqrt(2.0), atol=1e-15)


def test_mip_transform_has_unit_norm_and_period():
    q = np.random.default_rng(4).normal(size=7) * 5.0
    out = mip_transform(q).values
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(mip_transform(q + 2 * np.pi).values, out, atol=1e-12)


def test_generated_bundles_follow_manifests():
    state = _state()
    rng = np.random.default_rng(1)
    q = rng.normal(size=4)
    dec = hypernet_forward(q, "decoder-head", state)
    flow = hypernet_forward(q, "flow", state)
    assert dec.total == manifest_size(decoder_manifest(4, 3, 5))
    assert flow.total == manifest_size(FlowSpec(4, n_layers=2, hidden=4).manifest())
    assert state.banks["decoder-head"].shape[0] == int(np.ceil(dec.total / 16))


def test_unknown_target_is_rejected():
    with pytest.raises(ManifestMismatchError):
        hypernet_forward(np.zeros(4), "encoder", _state())


def test_initial_outputs_have_fan_in_variance():
    state = _state(seed=2, trunk_hidden=(32, 32))
    rng = np.random.default_rng(5)
    ratios = []
    for _ in range(200):
        flat = hypernet_forward(rng.normal(size=4), "decoder-head", state).numpy()
        ratios.append(flat / state.out_scales["decoder-head"])
    var = float(np.var(np.stack(ratios)))
    assert 0.5 < var < 2.0


def test_principled_init_replaces_only_output_heads():
    state = _state(seed=3)
    hidden = state.trunk["hidden0.w"].numpy().copy()
    old_head = state.trunk["head.flow.w"].numpy().copy()
    principled_init(state, np.random.default_rng(8))
    np.testing.assert_array_equal(state.trunk["hidden0.w"].numpy(), hidden)
    assert state.trunk["head.flow.w"].shape == old_head.shape
    assert not np.array_equal(state.trunk["head.flow.w"].numpy(), old_head)
    np.testing.assert_array_equal(state.trunk["head.decoder-head.b"].numpy(), 0.0)


def test_query_gradient_matches_numeric():
    state = _state(seed=3)
    check = ad.gradient_check(lambda q: ad.tsum(ad.square(hypernet_forward(q, "flow", state).flat)),
                              np.random.default_rng(6).normal(size=4))
    assert check < 1e-5


def test_phase_lifecycle():
    state = _state()
    rng = np.random.default_rng(0)
    assert reg_loss(state, 0.1).item() == 0.0
    with pytest.raises(PhaseOrderError):
        trainable_params(state)

    q1 = add_query(state, rng)
    assert q1.query_id == 1 and q1.q.requires_grad
    assert len(trainable_params(state)) == len(state.shared_params()) + 1
    with pytest.raises(PhaseOrderError):
        add_query(state, rng)

    finalize_phase(state)
    assert not q1.q.requires_grad
    assert [q.query_id for q in state.finalized] == [1]
    with pytest.raises(PhaseAlreadyFinalizedError):
        finalize_phase(state)
    assert reg_loss(state, 0.1).item() == pytest.approx(0.0, abs=1e-20)
    assert output_drift(state)[1] == 0.0

    assert add_query(state, rng).query_id == 2


def test_reg_loss_tracks_trunk_drift():
    state = _state()
    add_query(state, np.random.default_rng(0))
    finalize_phase(state)
    w = state.trunk["hidden0.w"]
    w.values = w.values + 0.05
    loss = reg_loss(state, 0.5).item()
    assert loss > 0.0
    assert reg_loss(state, 1.0).item() == pytest.approx(2.0 * loss)
    assert reg_loss(state, 0.0).item() == 0.0
    assert output_drift(state)[1] > 0.0


def test_finalize_refreshes_stored_but_keeps_reference():
    state = _state()
    rng = np.random.default_rng(0)
    add_query(state, rng)
    finalize_phase(state)
    ref = {t: v.copy() for t, v in state.reference_targets[1].items()}
    add_query(state, rng)
    state.trunk["head.flow.b"].values = state.trunk["head.flow.b"].values + 0.01
    finalize_phase(state)
    np.testing.assert_array_equal(state.reference_targets[1]["flow"], ref["flow"])
    np.testing.assert_allclose(state.stored_targets[1]["flow"], generate_numpy(state, 1)["flow"])
    assert set(state.stored_targets) == {1, 2}


def test_copy_is_independent():
    state = _state()
    add_query(state, np.random.default_rng(0))
    clone = state.copy()
    clone.trunk["hidden0.b"].values = clone.trunk["hidden0.b"].values + 1.0
    assert not np.allclose(clone.trunk["hidden0.b"].values, state.trunk["hidden0.b"].values)
