"""
自動微分コアのテスト
"""
import math

import numpy as np
import pytest

from decode.errors import DomainError, ShapeError
from decode.services import adcore as ad
from decode.services.adcore import AdamW, StepHalvingSchedule, Tape, gradient_check, parameter

EULER_GAMMA = 0.5772156649015329


def test_softmax_and_log_sum_exp():
    y = ad.softmax(np.array([0.0, 0.0]))
    np.testing.assert_allclose(y.values, [0.5, 0.5])
    assert ad.log_sum_exp(np.array([0.0, 0.0])).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_log_sum_exp_is_stable_for_large_inputs():
    out = ad.log_sum_exp(np.array([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0 + math.log(2.0))


def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.matmul(a, np.eye(3)).values, a)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_broadcast_mismatch():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))


@pytest.mark.parametrize("fn", [
    lambda x: ad.tsum(ad.tanh(x) * x),
    lambda x: ad.tsum(ad.exp(ad.clip(x, -3.0, 3.0))),
    lambda x: ad.tsum(ad.softmax(x, axis=-1) * np.arange(12.0).reshape(3, 4)),
    lambda x: ad.tsum(ad.log_softmax(x, axis=0)[1]),
    lambda x: ad.tsum(ad.square(ad.matmul(x, ad.transpose(x)))),
    lambda x: ad.mean(ad.concat([ad.sin(x), ad.cos(x)], axis=1)),
    lambda x: ad.tsum(ad.log_sum_exp(x, axis=1)),
    lambda x: ad.tsum(ad.sqrt(ad.square(x) + 1.0) / (ad.relu(x) + 2.0)),
], ids=["tanh", "exp-clip", "softmax", "log-softmax", "matmul", "concat", "lse", "sqrt-div"])
def test_gradients_match_central_differences(fn):
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert gradient_check(fn, x) < 1e-6


def test_split_and_stack_gradients():
    x = np.random.default_rng(1).normal(size=(4, 3))

    def fn(t):
        a, b = ad.split(t, [1, 3], axis=0)
        return ad.tsum(ad.stack([ad.tsum(a, axis=0), ad.tsum(b * b, axis=0)], axis=0))

    assert gradient_check(fn, x) < 1e-6


def test_reused_tensor_accumulates_gradient():
    x = parameter(np.array([2.0, 3.0]))
    with Tape() as tape:
        loss = ad.tsum(x * x + x)
    tape.backward(loss, [x])
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_tape_cannot_be_replayed():
    x = parameter(np.ones(2))
    with Tape() as tape:
        loss = ad.tsum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_requires_scalar_loss():
    x = parameter(np.ones(2))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with Tape() as tape:
        with ad.no_grad():
            y = ad.tsum(x * 3.0)
    assert not y.requires_grad
    assert tape.records == []


def test_unreached_parameter_gets_zero_gradient():
    x = parameter(np.ones(2))
    unused = parameter(np.ones(3))
    with Tape() as tape:
        loss = ad.tsum(x)
    tape.backward(loss, [x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_digamma_reference_values():
    assert ad.digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)
    assert ad.digamma(0.5) == pytest.approx(-EULER_GAMMA - 2.0 * math.log(2.0), abs=1e-10)
    assert ad.digamma(10.0) == pytest.approx(2.251752589066721, abs=1e-10)


def test_trigamma_and_lgamma_reference_values():
    assert ad.trigamma(1.0) == pytest.approx(math.pi ** 2 / 6, abs=1e-10)
    for x in (0.3, 1.0, 2.5, 7.0, 40.0):
        assert ad.lgamma(x) == pytest.approx(math.lgamma(x), abs=1e-10)


def test_special_functions_reject_non_positive():
    with pytest.raises(DomainError):
        ad.digamma(0.0)
    with pytest.raises(DomainError):
        ad.lgamma(np.array([1.0, -2.0]))


def test_digamma_gradient_is_trigamma():
    x = np.array([0.7, 1.5, 9.0])
    assert gradient_check(lambda t: ad.tsum(ad.digamma(t)), x) < 1e-5
    assert gradient_check(lambda t: ad.tsum(ad.lgamma(t)), x) < 1e-6


def test_trigamma_gradient_matches_scipy():
    from scipy import special

    x = parameter(np.array([0.05, 0.7, 3.0, 12.0]))
    with Tape() as tape:
        loss = ad.tsum(ad.trigamma(x))
    tape.backward(loss, [x])
    np.testing.assert_allclose(x.grad, special.polygamma(2, x.numpy()), rtol=1e-9)
    assert gradient_check(lambda t: ad.tsum(ad.trigamma(t)), np.array([0.7, 1.5, 9.0])) < 1e-5


def test_adamw_first_step_moves_by_lr():
    p = parameter(np.array([1.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.array([0.5])
    opt.step()
    assert p.values[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_weight_decay_is_decoupled():
    p = parameter(np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    assert p.values[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_step_halving_schedule():
    sched = StepHalvingSchedule(base_lr=1e-3, warm_epochs=20, halve_every=2)
    assert sched.lr_at(0) == 1e-3
    assert sched.lr_at(19) == 1e-3
    assert sched.lr_at(21) == pytest.approx(1e-3)
    assert sched.lr_at(24) == pytest.approx(1e-3 / 4)


def test_optimizer_step_is_pure():
    params = [np.array([1.0, 2.0])]
    state = ad.init_optimizer_state(params, lr=0.01)
    new, new_state = ad.optimizer_step(params, [np.array([1.0, -1.0])], state)
    np.testing.assert_array_equal(params[0], [1.0, 2.0])
    assert state.step == 0 and new_state.step == 1
    assert new[0][0] < 1.0
    assert new[0][1] > 2.0


def test_special_functions_match_scipy():
    from scipy import special

    for x in np.geomspace(1e-3, 1e3, 25):
        assert ad.digamma(float(x)) == pytest.approx(special.digamma(x), rel=1e-9, abs=1e-9)
        assert ad.trigamma(float(x)) == pytest.approx(special.polygamma(1, x), rel=1e-9)
        assert ad.lgamma(float(x)) == pytest.approx(special.gammaln(x), rel=1e-9, abs=1e-9)
