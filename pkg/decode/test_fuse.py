"""
事後融合（エビデンス・ディリクレ損失・NMS・推論）のテスト
"""
import math

import numpy as np
import pytest

from decode.errors import DomainError, ShapeError
from decode.services import adcore as ad
from decode.services.fuse import (
    FusionPredictor, PosteriorState, bayes_loss, dirichlet_entropy, evidence_from_loglik, nms_merge,
    posterior_merge, predict, sample_components, sample_dirichlet,
)
from decode.services.metrics import min_ade
from decode.services.prednet import ScenePrediction, decode, encode
from decode.testutil import domain_scenes


def _paths(endpoints, t_f=4):
    frac = (np.arange(t_f) + 1.0) / t_f
    return np.asarray(endpoints, dtype=float)[:, None, :] * frac[None, :, None]


def test_evidence_mapping():
    assert evidence_from_loglik(0.0, 8) == 1.0
    assert evidence_from_loglik(8 * math.log(1000.0), 8) == pytest.approx(1000.0)
    assert evidence_from_loglik(-1e9, 8) == pytest.approx(math.exp(-10.0))
    assert evidence_from_loglik(3.0, 8, mode="raw") == pytest.approx(math.exp(3.0))
    with pytest.raises(DomainError):
        evidence_from_loglik(float("nan"), 8)


def test_posterior_merge_worked_example():
    post = posterior_merge([0.5, 0.5], 10.0, [0.9, 0.1], 30.0, selected=2)
    np.testing.assert_allclose(post.chi_post, [0.8, 0.2], atol=1e-12)
    assert post.e_post == 40.0
    assert post.selected == 2


def test_posterior_merge_limits():
    chi0, chi_star = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.3, 0.1])
    np.testing.assert_allclose(posterior_merge(chi0, 10.0, chi_star, 0.0).chi_post, chi0, atol=1e-12)
    np.testing.assert_allclose(posterior_merge(chi0, 10.0, chi_star, 1e6).chi_post, chi_star, atol=1e-4)
    np.testing.assert_allclose(posterior_merge(chi0, 3.0, chi0, 7.0).chi_post, chi0, atol=1e-12)


def test_posterior_merge_rejects_bad_inputs():
    with pytest.raises(DomainError):
        posterior_merge([0.5, 0.6], 10.0, [0.5, 0.5], 1.0)
    with pytest.raises(ShapeError):
        posterior_merge([0.5, 0.5], 10.0, [0.2, 0.3, 0.5], 1.0)
    with pytest.raises(DomainError):
        posterior_merge([0.5, 0.5], 10.0, [0.5, 0.5], -1.0)


def test_bayes_loss_uniform_dirichlet():
    assert dirichlet_entropy(np.array([[1.0, 1.0]])).values[0] == pytest.approx(0.0, abs=1e-10)
    assert bayes_loss(np.array([0.5, 0.5]), 2.0, 0).item() == pytest.approx(1.0, abs=1e-10)


def test_bayes_loss_symmetric_in_winner():
    chi = np.full(4, 0.25)
    losses = [bayes_loss(chi, 6.0, w).item() for w in range(4)]
    assert max(losses) - min(losses) < 1e-12


def test_expected_nll_matches_monte_carlo():
    alpha = np.array([2.0, 3.0, 1.5])
    closed = ad.digamma(alpha.sum()) - ad.digamma(alpha[0])
    eta = sample_dirichlet(alpha, 200_000, np.random.default_rng(0))
    assert float(np.mean(-np.log(eta[:, 0]))) == pytest.approx(closed, abs=1e-2)


def test_bayes_loss_gradient():
    chi = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    assert ad.gradient_check(lambda c: bayes_loss(c, np.array([5.0, 12.0]), np.array([1, 0])), chi) < 1e-4


def test_bayes_loss_rejects_non_positive_alpha():
    with pytest.raises(DomainError):
        bayes_loss(np.array([1.0, 0.0]), 3.0, 0)


def test_dirichlet_sampler_mean():
    alpha = np.array([1.0, 2.0, 7.0])
    eta = sample_dirichlet(alpha, 100_000, np.random.default_rng(1))
    np.testing.assert_allclose(eta.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(eta.mean(axis=0), alpha / alpha.sum(), atol=5e-3)


def test_component_sampling_frequencies():
    idx = sample_components(np.array([1.0, 1.0]), 100_000, np.random.default_rng(2))
    assert abs(np.mean(idx == 0) - 0.5) < 0.01
    concentrated = sample_components(np.array([1e-6, 1e6, 1e-6]), 50, np.random.default_rng(3))
    assert set(concentrated.tolist()) == {1}


def test_nms_without_specialized_model():
    gen = ScenePrediction(chi=np.array([0.2, 0.5, 0.3]), trajectories=_paths([[1, 0], [2, 0], [3, 0]]),
                          source="generalized")
    post = PosteriorState(chi_post=gen.chi, e_post=10.0, e0=10.0, e_star=0.0)
    fused = nms_merge(gen, None, post, 2.0)
    np.testing.assert_allclose(fused.weights, [0.5, 0.3, 0.2])
    assert fused.weight_split()["generalized"] == pytest.approx(1.0)


def test_nms_merges_duplicates_into_posterior():
    traj = _paths([[0, 0], [30, 0]])
    gen = ScenePrediction(chi=np.array([0.7, 0.3]), trajectories=traj, source="generalized")
    spec = ScenePrediction(chi=np.array([0.4, 0.6]), trajectories=traj.copy(), source="specialized-1")
    post = posterior_merge(gen.chi, 10.0, spec.chi, 30.0)
    fused = nms_merge(gen, spec, post, 2.0)
    assert len(fused.components) == 2
    np.testing.assert_allclose(fused.weights, [0.525, 0.475], atol=1e-12)
    ends = [c.trajectory[-1][0] for c in fused.components]
    assert ends == [30.0, 0.0]


def test_nms_prefers_confident_specialized_model():
    gen = ScenePrediction(chi=np.array([0.5, 0.5]), trajectories=_paths([[0, 10], [0, -10]]),
                          source="generalized")
    spec = ScenePrediction(chi=np.array([0.5, 0.5]), trajectories=_paths([[40, 0], [20, 0]]),
                           source="specialized-1")
    fused = nms_merge(gen, spec, posterior_merge(gen.chi, 1.0, spec.chi, 1e4), 2.0)
    assert [c.provenance for c in fused.components] == ["specialized", "specialized"]
    assert sum(fused.weights) <= 1.0 + 1e-9


@pytest.mark.parametrize("e_star", [0.0, 0.02, 0.1])
def test_nms_keeps_every_generalized_mode_under_weak_evidence(e_star):
    gen = ScenePrediction(chi=np.array([0.995, 0.004, 0.001]), trajectories=_paths([[0, 10], [0, -10], [40, 0]]),
                          source="generalized")
    spec = ScenePrediction(chi=np.array([0.9, 0.05, 0.05]), trajectories=_paths([[0, 30], [0, -30], [-30, 0]]),
                           source="specialized-1")
    gt = gen.trajectories[2]
    fused = nms_merge(gen, spec, posterior_merge(gen.chi, 10.0, spec.chi, e_star, selected=1), 2.0)
    assert [c.provenance for c in fused.components] == ["generalized"] * 3
    assert min_ade(fused.trajectories, gt) <= min_ade(gen.trajectories, gt) * 1.01
    assert sum(fused.weights) <= 1.0 + 1e-9


def test_nms_slots_follow_evidence_share():
    gen = ScenePrediction(chi=np.array([0.5, 0.3, 0.2]), trajectories=_paths([[0, 10], [0, -10], [40, 0]]),
                          source="generalized")
    spec = ScenePrediction(chi=np.array([0.6, 0.3, 0.1]), trajectories=_paths([[0, 30], [0, -30], [-30, 0]]),
                           source="specialized-1")
    fused = nms_merge(gen, spec, posterior_merge(gen.chi, 10.0, spec.chi, 5.0), 2.0)
    provenance = [c.provenance for c in fused.components]
    assert len(provenance) == 3
    assert provenance.count("generalized") == 2 and provenance.count("specialized") == 1


def test_nms_rejects_non_positive_radius():
    gen = ScenePrediction(chi=np.array([1.0]), trajectories=_paths([[1, 0]]), source="generalized")
    post = PosteriorState(chi_post=gen.chi, e_post=1.0, e0=1.0, e_star=0.0)
    with pytest.raises(ValueError):
        nms_merge(gen, None, post, 0.0)


def test_pretrained_framework_predicts_generalized_only(pretrained, config):
    scene = domain_scenes(config, "arc", 1, seed_offset=5)[0]
    result = predict(scene, pretrained)
    assert result.log_evidence == {}
    split = result.fused.weight_split()
    assert split["generalized"] == pytest.approx(1.0)
    assert split["specialized"] == 0.0
    assert result.trajectories.shape == (config.model.n_modes, config.data.t_f, 2)


def test_deterministic_prediction_is_ranked(phase2, config):
    scene = domain_scenes(config, "straight", 1, seed_offset=7)[0]
    result = predict(scene, phase2)
    w = result.fused.weights
    assert len(w) <= config.model.n_modes
    assert np.all(np.diff(w) <= 0)
    assert np.all(w >= 0) and w.sum() <= 1.0 + 1e-9
    assert set(result.log_evidence) == {1, 2}
    assert result.fused.posterior.selected in (1, 2)
    np.testing.assert_allclose(result.fused.posterior.chi_post.sum(), 1.0, atol=1e-9)


def test_stochastic_prediction_requires_rng(phase1, config):
    scene = domain_scenes(config, "arc", 1, seed_offset=9)[0]
    with pytest.raises(ValueError):
        predict(scene, phase1, k=4, deterministic=False)
    result = predict(scene, phase1, k=4, deterministic=False, rng=np.random.default_rng(0))
    assert result.trajectories.shape == (4, config.data.t_f, 2)


def test_large_prior_evidence_keeps_generalized_accuracy(phase2, config):
    scenes = domain_scenes(config, "turn", 20, seed_offset=11)
    fused, _ = FusionPredictor(phase2, e0=1e9).predict_batch(scenes)
    gen = decode(encode(scenes, phase2.encoder), phase2.generalized, phase2.anchors)
    for b, scene in enumerate(scenes):
        base = min_ade(gen.trajectories.values[b], scene.future)
        assert min_ade(fused[b], scene.future) == pytest.approx(base, rel=1e-2)


def test_specialized_only_predictor(phase1, config):
    scenes = domain_scenes(config, "arc", 3, seed_offset=13)
    fused, _ = FusionPredictor(phase1, use_generalized=False).predict_batch(scenes)
    for fp in fused:
        assert fp.weight_split()["specialized"] == pytest.approx(1.0)
        assert fp.posterior.e0 == 0.0
