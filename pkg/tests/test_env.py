import dataclasses

import numpy as np
import pytest

from ctdloco.env import (EnvConfig, TeacherGains, contact_gate, env_step, is_fallen, observe,
                         reset, teacher_action)
from ctdloco.exceptions import ConfigurationError, NumericError
from ctdloco.perturbation import PhysicalPerturbationSpec, physical_perturbation_trial
from ctdloco.rollout import simulate

QUIET = EnvConfig().without_noise()


def test_free_decay_is_geometric():
    cfg = QUIET
    s = reset(cfg, 1.0)
    us = [float(s.u)]
    for _ in range(5):
        s, _ = env_step(s, np.zeros(4), np.zeros(2), cfg)
        us.append(float(s.u))
    np.testing.assert_allclose(np.array(us[1:]) / np.array(us[:-1]), 1 - cfg.damping * cfg.dt,
                               rtol=1e-14)


def test_lateral_force_increment_is_gate_independent():
    cfg = QUIET
    for phase in (0.0, 1.0, np.pi):
        s = reset(cfg, 1.0, phase=phase)
        s2, _ = env_step(s, np.zeros(4), np.array([0.0, cfg.body_weight]), cfg)
        assert float(s2.v) == pytest.approx(cfg.body_weight / cfg.mass * cfg.dt, rel=1e-14)


def test_forces_superpose():
    cfg = QUIET
    s = reset(cfg, 1.5, phase=0.7)
    a = np.array([0.3, -0.2, 0.1, 0.4])
    f1, f2 = np.array([5.0, -20.0]), np.array([-2.0, 7.0])
    base, _ = env_step(s, a, np.zeros(2), cfg)
    s1, _ = env_step(s, a, f1, cfg)
    s2, _ = env_step(s, a, f2, cfg)
    s12, _ = env_step(s, a, f1 + f2, cfg)
    for name in ("u", "v"):
        lhs = getattr(s12, name) - getattr(base, name)
        rhs = (getattr(s1, name) - getattr(base, name)) + (getattr(s2, name) - getattr(base, name))
        assert float(lhs) == pytest.approx(float(rhs), abs=1e-15)


def test_phase_stays_wrapped():
    cfg = QUIET
    s = reset(cfg, 2.0, phase=6.2)
    for _ in range(300):
        s, _ = env_step(s, np.array([0, 0, 0, np.sin(s.gait_phase)]), np.zeros(2), cfg)
        assert 0 <= float(s.gait_phase) < 2 * np.pi


def test_nan_action_raises():
    with pytest.raises(NumericError):
        env_step(reset(QUIET, 1.0), np.array([np.nan, 0, 0, 0]), np.zeros(2), QUIET)


def test_observation_layout():
    s = reset(QUIET, 1.2, v_cmd=0.1, r_cmd=-0.3, phase=0.0)
    obs = observe(s, QUIET)
    assert obs.shape == (12,)
    np.testing.assert_allclose(obs[:6], [1.2, 0.1, -0.3, 1.2, 0.1, -0.3])
    np.testing.assert_allclose(obs[10:], [1.0, 0.0], atol=1e-15)


def test_noise_needs_rng():
    cfg = EnvConfig(noise_std=(0.01,) * 12)
    with pytest.raises(ConfigurationError):
        observe(reset(cfg, 1.0), cfg)


def test_noisy_step_is_deterministic_given_seed():
    cfg = EnvConfig(noise_std=(0.05,) * 12)
    out = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        s = reset(cfg, 1.0)
        for _ in range(20):
            s, obs = env_step(s, np.ones(4), np.zeros(2), cfg, rng)
        out.append(obs)
    assert np.array_equal(out[0], out[1])


def test_contact_gates_are_complementary():
    phase = np.linspace(0, 2 * np.pi, 17)
    np.testing.assert_allclose(contact_gate(phase) + contact_gate(phase + np.pi), 1.0)


def test_teacher_zero_error_and_rhythm_gives_zero_action():
    gains = TeacherGains(thrust_rhythm=0.0, lateral_rhythm=0.0, swing_amplitude=0.0)
    obs = observe(reset(QUIET, 1.3), QUIET)
    assert np.all(teacher_action(obs, 0.4, gains) == 0)


def test_teacher_correction_is_proportional():
    gains = TeacherGains(thrust_rhythm=0.0, lateral_rhythm=0.0, swing_amplitude=0.0)
    obs = observe(reset(QUIET, 1.0), QUIET)
    one, two = obs.copy(), obs.copy()
    one[:3] += [-0.1, 0.05, 0.2]
    two[:3] += [-0.2, 0.1, 0.4]
    np.testing.assert_allclose(teacher_action(two, 0.0, gains), 2 * teacher_action(one, 0.0, gains))


def test_teacher_tracks_speed():
    tr = simulate(None, QUIET, [2.0], 1200, driver="teacher")
    assert abs(tr.env_u[200:, 0].mean() - 2.0) < 0.2
    assert not tr.fallen[-1, 0]


def test_periodic_actions_give_periodic_states():
    # open-loop rhythm at the gait period; the phase entrains to the swing channel
    cfg = QUIET
    period = int(round(cfg.gait_period_steps(2.0)))
    s = reset(cfg, 2.0, phase=1.0)
    us = []
    for t in range(2500):
        th = 2 * np.pi * t / period
        a = np.array([8 / 3 * (1 + np.cos(th)), np.sin(th), 0.0, np.sin(th)])
        s, _ = env_step(s, a, np.zeros(2), cfg)
        us.append(float(s.u))
    u = np.array(us)
    assert np.max(np.abs(u[2000:2400] - u[2000 + period:2400 + period])) < 1e-8


def test_teacher_recovers_from_half_body_weight_push():
    spec = PhysicalPerturbationSpec(0.5, 100.0)
    assert physical_perturbation_trial(None, QUIET, spec, seed=3, driver="teacher").recovered


def test_fall_needs_sustained_violation():
    cfg = QUIET
    s = reset(cfg, 1.0)
    spiked = dataclasses.replace(s, v=np.asarray(10 * cfg.v_fall))
    s1, _ = env_step(spiked, np.zeros(4), np.zeros(2), cfg)
    assert not is_fallen(s1, cfg)
    s = s1
    for _ in range(cfg.n_fall):
        s = dataclasses.replace(s, v=np.asarray(10 * cfg.v_fall))
        s, _ = env_step(s, np.zeros(4), np.zeros(2), cfg)
    assert is_fallen(s, cfg)


def test_config_rejects_unknown_keys_and_bad_dt(tmp_path):
    with pytest.raises(ConfigurationError):
        EnvConfig.from_dict({"gravity_x": 1})
    with pytest.raises(ConfigurationError):
        EnvConfig(dt=0.0)
    path = tmp_path / "env.json"
    QUIET.save(path)
    assert EnvConfig.load(path) == QUIET
