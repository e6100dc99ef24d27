import numpy as np
import pytest
from sklearn.base import clone

from ctdloco.env import EnvConfig
from ctdloco.exceptions import ConfigurationError
from ctdloco.perturbation import gait_period
from ctdloco.policy import PolicyDims, PolicyNet
from ctdloco.rollout import simulate
from ctdloco.trainer import (AdamState, TBPTTImitationTrainer, TrainConfig, adam_update,
                             sequence_gradients, tbptt_gradients, train)
from oracles import fd_gradient

SMALL = {"d_obs": 12, "mlp_widths": [6], "n_cells": 4, "d_act": 4}


def window(dims, rng, k=5, batch=2):
    obs = rng.normal(size=(k, batch, dims.d_obs))
    tgt = rng.normal(size=(k, batch, dims.d_act))
    s0 = rng.normal(size=(batch, 2 * dims.n_cells)) * 0.5
    return obs, tgt, s0


def loss_of(dims, obs, tgt, s0, weights=None):
    def f(params):
        return tbptt_gradients(PolicyNet.from_parameters(dims, params), obs, tgt, s0, weights)[0]
    return f


def relative_gap(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_gradients_match_finite_differences(small_dims, small_net, rng):
    obs, tgt, s0 = window(small_dims, rng)
    w = rng.uniform(0.5, 2.0, size=(5, 2))
    _, grads, _ = tbptt_gradients(small_net, obs, tgt, s0, w)
    fd = fd_gradient(loss_of(small_dims, obs, tgt, s0, w), small_net.parameters())
    for g, f in zip(grads, fd):
        assert relative_gap(g, f) < 1e-5


def test_observation_gradient_matches_finite_differences(small_dims, small_net, rng):
    obs, tgt, s0 = window(small_dims, rng, k=3, batch=1)
    _, _, d_obs = tbptt_gradients(small_net, obs, tgt, s0)
    fd = np.zeros_like(obs)
    for idx in np.ndindex(obs.shape):
        p, m = obs.copy(), obs.copy()
        p[idx] += 1e-5
        m[idx] -= 1e-5
        fd[idx] = (tbptt_gradients(small_net, p, tgt, s0)[0]
                   - tbptt_gradients(small_net, m, tgt, s0)[0]) / 2e-5
    assert relative_gap(d_obs, fd) < 1e-5


def test_single_step_from_zero_state_has_no_recurrent_gradient(small_dims, small_net, rng):
    obs, tgt, _ = window(small_dims, rng, k=1)
    _, grads, _ = tbptt_gradients(small_net, obs, tgt, np.zeros((2, 8)))
    assert np.all(grads[-4] == 0)  # w_hh


def test_gradient_is_affine_in_targets(small_dims, small_net, rng):
    obs, tgt, s0 = window(small_dims, rng)
    g0 = tbptt_gradients(small_net, obs, 0 * tgt, s0)[1]
    g1 = tbptt_gradients(small_net, obs, tgt, s0)[1]
    g2 = tbptt_gradients(small_net, obs, 2 * tgt, s0)[1]
    for a, b, c in zip(g0, g1, g2):
        np.testing.assert_allclose(c - a, 2 * (b - a), atol=1e-12)


def test_unbatched_window(small_net, small_dims, rng):
    obs, tgt, s0 = window(small_dims, rng, batch=1)
    full = tbptt_gradients(small_net, obs, tgt, s0)
    flat = tbptt_gradients(small_net, obs[:, 0], tgt[:, 0], s0[0])
    assert full[0] == flat[0]
    np.testing.assert_array_equal(full[2][:, 0], flat[2])
    with pytest.raises(ConfigurationError):
        tbptt_gradients(small_net, obs, tgt[:, :, :1], s0)


def test_window_boundary_blocks_gradient(small_dims, small_net, rng):
    k = 3
    obs, tgt, _ = window(small_dims, rng, k=12)
    states = rng.normal(size=(12, 2, 8))
    weights = np.zeros((12, 2))
    weights[9] = 1.0  # only the loss term at step 9 counts
    _, g_ref, d_obs = sequence_gradients(small_net, obs, tgt, states, k, weights)
    assert np.all(d_obs[:9] == 0)
    assert np.any(d_obs[9] != 0)
    moved = obs.copy()
    moved[9 - (k + 1)] += 3.0
    _, g_new, _ = sequence_gradients(small_net, moved, tgt, states, k, weights)
    for a, b in zip(g_ref, g_new):
        assert np.array_equal(a, b)


def test_per_step_windows_need_no_history(small_dims, small_net, rng):
    obs, tgt, _ = window(small_dims, rng, k=4)
    states = rng.normal(size=(4, 2, 8))
    _, grads, _ = sequence_gradients(small_net, obs, tgt, states, 1)
    total = [np.zeros_like(p) for p in small_net.parameters()]
    for t in range(4):
        _, g, _ = tbptt_gradients(small_net, obs[t:t + 1], tgt[t:t + 1], states[t],
                                  norm=tgt.size)
        for acc, x in zip(total, g):
            acc += x
    for a, b in zip(grads, total):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_adam_zero_gradient():
    params = [np.ones(3)]
    state = AdamState([np.full(3, 0.5)], [np.full(3, 0.25)], 3)
    new, st = adam_update(params, [np.zeros(3)], state)
    assert np.allclose(new[0], params[0] - 1e-3 * (0.45 / (1 - 0.9 ** 4))
                       / (np.sqrt(0.25 * 0.999 / (1 - 0.999 ** 4)) + 1e-8))
    np.testing.assert_allclose(st.m[0], 0.45)
    np.testing.assert_allclose(st.v[0], 0.25 * 0.999)
    fresh, _ = adam_update(params, [np.zeros(3)], AdamState.zeros_like(params))
    assert np.array_equal(fresh[0], params[0])


def test_adam_constant_gradient_step_tends_to_lr():
    params = [np.zeros(2)]
    state = AdamState.zeros_like(params)
    g = [np.array([3.0, -0.01])]
    for _ in range(2000):
        new, state = adam_update(params, g, state, lr=1e-3)
        step = new[0] - params[0]
        params = new
    np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=1e-5)


def test_adam_is_pure_and_deterministic(rng):
    params = [rng.normal(size=4)]
    grads = [rng.normal(size=4)]
    keep = params[0].copy()
    a = adam_update(params, grads, AdamState.zeros_like(params))
    b = adam_update(params, grads, AdamState.zeros_like(params))
    assert np.array_equal(a[0][0], b[0][0])
    assert np.array_equal(params[0], keep)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(k_trunc=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"k_trunk": 4})
    cfg = TrainConfig(k_trunc=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_short_training_is_deterministic():
    cfg = TrainConfig(epochs=5, batch=4, rollout_steps=16, dims=SMALL, perturb_during_training=True)
    init = PolicyNet.random(cfg.policy_dims(), seed=0)
    a, rep_a = train(init, EnvConfig(), cfg)
    b, rep_b = train(init, EnvConfig(), cfg)
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)
    assert rep_a.loss_curve == rep_b.loss_curve
    assert all(np.isfinite(v) and v >= 0 for v in rep_a.loss_curve)
    with pytest.raises(ConfigurationError):
        train(PolicyNet.random(PolicyDims(n_cells=3)), EnvConfig(), cfg)


def test_estimator_wrapper():
    est = TBPTTImitationTrainer(k_trunc=4, epochs=2, rollout_steps=8, batch=2)
    assert clone(est).get_params()["k_trunc"] == 4
    est.fit(init=PolicyNet.random(PolicyDims(), seed=0))
    assert est.predict(np.zeros((3, 12))).shape == (3, 4)


@pytest.mark.slow
def test_default_training_run(trained16):
    net, report = trained16
    assert report.final_heldout_loss < 0.1 * report.initial_heldout_loss
    assert report.tracking_error < 0.2
    tr = simulate(net, EnvConfig(), [2.0], 1000)
    thrust = tr.actions[200:, 0, 0]
    period = gait_period(thrust)
    assert abs(period - EnvConfig().gait_period_steps(2.0)) <= 2
    assert np.max(np.abs(thrust[:-period] - thrust[period:])) < 0.1 * np.ptp(thrust)
