"""Planar 3-DOF locomotion stand-in with phase-gated actuation.

Body-frame velocities ``u`` (forward), ``v`` (lateral) and yaw rate ``r``
follow damped linear dynamics. Thrust acts through the stance gate
``g(phase)`` and lateral actuation through ``g(phase + pi)``, where ``g`` is a
raised cosine. The gait phase advances at ``omega(u*)`` and is entrained by
the fourth action channel (leg swing), so the closed loop is autonomous: the
policy's own rhythm sets the stride timing.

Action layout: ``[thrust, lateral, turn, swing]``.
Observation layout (12 channels): ``[u, v, r, u*, v*, r*, a_prev(4), g(phase), g(phase + pi)]``.

All state fields are numpy arrays with a shared (possibly empty) batch shape.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, NumericError, WeightFileError
from .validation import check_positive

D_OBS = 12
D_ACT = 4
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.01
    mass: float = 30.0
    gravity: float = 9.81
    damping: float = 1.0
    actuation_gain: float = 1.0
    thrust_limit: float = 20.0
    lateral_limit: float = 20.0
    turn_limit: float = 5.0
    swing_limit: float = 1.5
    gait_freq_base: float = 1.0  # Hz at zero commanded speed
    gait_freq_gain: float = 0.5  # Hz per m/s of commanded speed
    phase_coupling: float = 20.0
    noise_std: tuple = (0.0,) * D_OBS
    v_fall: float = 1.0
    u_fall: float = 1.5
    n_fall: int = 20

    def __post_init__(self):
        noise = self.noise_std
        if np.isscalar(noise):
            noise = (float(noise),) * D_OBS
        noise = tuple(float(x) for x in noise)
        if len(noise) != D_OBS:
            raise ConfigurationError(f"noise_std needs {D_OBS} entries, got {len(noise)}")
        object.__setattr__(self, "noise_std", noise)
        for name in ("dt", "mass", "gravity", "v_fall", "u_fall", "n_fall",
                     "thrust_limit", "lateral_limit", "turn_limit", "swing_limit"):
            check_positive(getattr(self, name), name)

    @property
    def body_weight(self):
        return self.mass * self.gravity

    def gait_frequency(self, u_cmd):
        """Angular stride frequency in rad/s."""
        return TWO_PI * (self.gait_freq_base + self.gait_freq_gain * np.asarray(u_cmd))

    def gait_period_steps(self, u_cmd):
        return TWO_PI / (self.gait_frequency(u_cmd) * self.dt)

    def without_noise(self):
        return dataclasses.replace(self, noise_std=(0.0,) * D_OBS)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["noise_std"] = list(self.noise_std)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown EnvConfig keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WeightFileError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True)
class TeacherGains:
    """Gains of the hand-designed supervisor.

    ``thrust_rhythm`` defaults to ``damping / 0.75``: the stance pulse
    ``u* (1 + cos phase)`` seen through the gate ``(1 + cos phase) / 2`` has
    mean ``0.75 u*``, which then exactly cancels the damping at ``u = u*``.
    """

    kp_forward: float = 3.0
    kp_lateral: float = 6.0
    kp_turn: float = 2.0
    thrust_rhythm: float = 4.0 / 3.0
    lateral_rhythm: float = 1.0
    swing_amplitude: float = 1.0


@dataclass(frozen=True)
class EnvState:
    u: np.ndarray
    v: np.ndarray
    r: np.ndarray
    gait_phase: np.ndarray
    step_count: np.ndarray
    u_cmd: np.ndarray
    v_cmd: np.ndarray
    r_cmd: np.ndarray
    prev_action: np.ndarray
    fall_count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.fall_count is None:
            object.__setattr__(self, "fall_count", np.zeros(np.shape(self.u), dtype=np.int64))

    @property
    def batch_shape(self):
        return np.shape(self.u)


def contact_gate(phase):
    """Raised-cosine stance gate, 1 at mid-stance (phase 0), 0 at mid-swing."""
    return 0.5 * (1.0 + np.cos(phase))


def reset(cfg, u_cmd, v_cmd=0.0, r_cmd=0.0, phase=0.0, batch=None):
    """Start at the commanded velocity with zero previous action."""
    shape = () if batch is None else (batch,)
    full = lambda x: np.broadcast_to(np.asarray(x, dtype=np.float64), shape).copy()  # noqa: E731
    u_cmd = full(u_cmd)
    return EnvState(
        u=u_cmd.copy(), v=full(v_cmd), r=full(r_cmd), gait_phase=np.mod(full(phase), TWO_PI),
        step_count=np.zeros(shape, dtype=np.int64), u_cmd=u_cmd, v_cmd=full(v_cmd),
        r_cmd=full(r_cmd), prev_action=np.zeros(shape + (D_ACT,)),
    )


def observe(state, cfg, rng=None):
    obs = np.concatenate([
        np.stack([state.u, state.v, state.r, state.u_cmd, state.v_cmd, state.r_cmd], axis=-1),
        state.prev_action,
        np.stack([contact_gate(state.gait_phase), contact_gate(state.gait_phase + np.pi)],
                 axis=-1),
    ], axis=-1)
    noise = np.asarray(cfg.noise_std)
    if np.any(noise > 0):
        if rng is None:
            raise ConfigurationError("observation noise is enabled but no rng was given")
        obs = obs + rng.normal(size=obs.shape) * noise
    return obs


def _saturate(a, limit):
    return limit * np.tanh(a / limit)


def env_step(state, action, external_force, cfg, rng=None):
    """Advance one ``dt``. Returns ``(state', observation')``.

    ``external_force`` is ``(fx, fy)`` in newtons along the body axes.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != D_ACT:
        raise ConfigurationError(f"action has {action.shape[-1]} channels, expected {D_ACT}")
    if not np.all(np.isfinite(action)):
        raise NumericError("non-finite action")
    force = np.asarray(external_force, dtype=np.float64)
    fx, fy = force[..., 0], force[..., 1]
    dt, kd, gain = cfg.dt, cfg.damping, cfg.actuation_gain
    phase = state.gait_phase
    thrust = gain * _saturate(action[..., 0], cfg.thrust_limit)
    lateral = gain * _saturate(action[..., 1], cfg.lateral_limit)
    turn = gain * _saturate(action[..., 2], cfg.turn_limit)
    swing = _saturate(action[..., 3], cfg.swing_limit)

    u = state.u + dt * (-kd * state.u + contact_gate(phase) * thrust + fx / cfg.mass)
    v = state.v + dt * (-kd * state.v + contact_gate(phase + np.pi) * lateral + fy / cfg.mass)
    r = state.r + dt * (-kd * state.r + turn)
    # the leg reference sin(phase) is pulled toward the commanded swing
    phase_rate = cfg.gait_frequency(state.u_cmd) + cfg.phase_coupling * (
        swing - np.sin(phase)) * np.cos(phase)
    new_phase = np.mod(phase + dt * phase_rate, TWO_PI)

    bad = (np.abs(v) > cfg.v_fall) | (np.abs(u - state.u_cmd) > cfg.u_fall)
    fall_count = np.where(bad, state.fall_count + 1, 0)
    new = dataclasses.replace(
        state, u=u, v=v, r=r, gait_phase=new_phase, step_count=state.step_count + 1,
        prev_action=np.array(action, copy=True), fall_count=fall_count,
    )
    return new, observe(new, cfg, rng)


def is_fallen(state, cfg):
    """True where the fall condition has held for at least ``n_fall`` steps."""
    return state.fall_count >= cfg.n_fall


def teacher_action(obs, internal_phase, gains=TeacherGains()):
    """Proportional tracking plus rhythm phase-locked to ``internal_phase``."""
    obs = np.asarray(obs, dtype=np.float64)
    u, v, r = obs[..., 0], obs[..., 1], obs[..., 2]
    u_cmd, v_cmd, r_cmd = obs[..., 3], obs[..., 4], obs[..., 5]
    phase = np.asarray(internal_phase, dtype=np.float64)
    return np.stack([
        gains.kp_forward * (u_cmd - u) + gains.thrust_rhythm * u_cmd * (1.0 + np.cos(phase)),
        gains.kp_lateral * (v_cmd - v) + gains.lateral_rhythm * np.sin(phase),
        gains.kp_turn * (r_cmd - r),
        gains.swing_amplitude * np.sin(phase),
    ], axis=-1)
