"""Batched closed-loop rollouts of a policy (or the teacher) in the toy env."""

import csv
from dataclasses import dataclass

import numpy as np

from . import env as envmod
from .policy import RecurrentState

# derived seeds -----------------------------------------------------------------


def derive_seed(master_seed, *key):
    """Counter-based seed for the trial identified by ``key``.

    ``SeedSequence(master_seed, spawn_key=key)`` hashes the master seed and the
    integer key tuple, so every trial's seed depends only on its own key and
    never on how many other trials ran before it.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class RolloutTrace:
    """Time-major record of a batch of closed-loop rollouts.

    ``states[t]`` is the recurrent state fed into the policy at step ``t``
    (after any neural perturbation), ``obs[t]``/``actions[t]``/``forces[t]``
    belong to the same step and ``env_u[t]`` etc. to the env state that
    produced ``obs[t]``.
    """

    states: np.ndarray  # (T, B, 2n)
    obs: np.ndarray  # (T, B, d_obs)
    actions: np.ndarray  # (T, B, d_act)
    forces: np.ndarray  # (T, B, 2)
    env_u: np.ndarray  # (T, B)
    env_v: np.ndarray
    env_r: np.ndarray
    env_phase: np.ndarray
    fallen: np.ndarray  # (T, B) latched
    u_cmd: np.ndarray  # (B,)
    aborted: np.ndarray = None  # (B,) non-finite action encountered

    def __len__(self):
        return self.states.shape[0]

    @property
    def batch_size(self):
        return self.states.shape[1]

    def agent(self, i):
        """Single-agent view that keeps a batch axis of length one."""
        sl = slice(i, i + 1)
        return RolloutTrace(
            self.states[:, sl], self.obs[:, sl], self.actions[:, sl], self.forces[:, sl],
            self.env_u[:, sl], self.env_v[:, sl], self.env_r[:, sl], self.env_phase[:, sl],
            self.fallen[:, sl], self.u_cmd[sl],
            None if self.aborted is None else self.aborted[sl],
        )


def simulate(net, cfg, u_cmd, steps, *, phase0=0.0, state0=None, force=None,
             neural_event=None, driver="student", rng=None, teacher_gains=None):
    """Run ``steps`` closed-loop steps for a batch of agents.

    ``force`` is ``None`` or an array (steps, B, 2) of external forces in
    newtons. ``neural_event`` is ``None`` or ``(t_apply, fn)`` with ``fn``
    mapping the (B, 2n) state matrix to its perturbed value just before the
    policy consumes it at step ``t_apply``. ``driver`` selects whose action
    drives the env: ``"student"`` (the net) or ``"teacher"``.
    """
    u_cmd = np.atleast_1d(np.asarray(u_cmd, dtype=np.float64))
    batch = u_cmd.shape[0]
    gains = teacher_gains or envmod.TeacherGains()
    es = envmod.reset(cfg, u_cmd, phase=np.broadcast_to(phase0, (batch,)), batch=batch)
    obs = envmod.observe(es, cfg, rng)
    n2 = net.dims.state_size if net is not None else 0
    if state0 is None:
        s = np.zeros((batch, n2))
    else:
        s = np.array(np.broadcast_to(state0, (batch, n2)), dtype=np.float64)
    if force is None:
        force = np.zeros((steps, batch, 2))

    rec = {k: [] for k in ("states", "obs", "actions", "u", "v", "r", "phase", "fallen")}
    fallen = np.zeros(batch, dtype=bool)
    aborted = np.zeros(batch, dtype=bool)
    for t in range(steps):
        if neural_event is not None and t == neural_event[0]:
            s = np.asarray(neural_event[1](s), dtype=np.float64)
        if driver == "teacher":
            action = envmod.teacher_action(obs, es.gait_phase, gains)
            if net is not None:
                _, st = net.step(obs, RecurrentState.from_vector(s))
                s_next = st.as_vector()
            else:
                s_next = s
        else:
            action, st = net.step(obs, RecurrentState.from_vector(s))
            s_next = st.as_vector()
        bad = ~np.all(np.isfinite(action), axis=-1)
        if bad.any():
            aborted |= bad
            action = np.where(bad[:, None], 0.0, action)
            s_next = np.where(bad[:, None], 0.0, s_next)
        rec["states"].append(s)
        rec["obs"].append(obs)
        rec["actions"].append(action)
        rec["u"].append(es.u)
        rec["v"].append(es.v)
        rec["r"].append(es.r)
        rec["phase"].append(es.gait_phase)
        es, obs = envmod.env_step(es, action, force[t], cfg, rng)
        fallen = fallen | envmod.is_fallen(es, cfg)
        rec["fallen"].append(fallen.copy())
        s = s_next
    return RolloutTrace(
        states=np.array(rec["states"]).reshape(steps, batch, n2),
        obs=np.array(rec["obs"]), actions=np.array(rec["actions"]), forces=np.array(force),
        env_u=np.array(rec["u"]), env_v=np.array(rec["v"]), env_r=np.array(rec["r"]),
        env_phase=np.array(rec["phase"]), fallen=np.array(rec["fallen"]), u_cmd=u_cmd,
        aborted=aborted,
    )


def write_trace_csv(path, trace, agent=0, header=None):
    """RolloutTrace CSV: t, env state, obs, action, force, fallen flag."""
    d_obs, d_act = trace.obs.shape[-1], trace.actions.shape[-1]
    cols = (["t", "u", "v", "r", "gait_phase"] + [f"obs_{i}" for i in range(d_obs)]
            + [f"action_{i}" for i in range(d_act)] + ["fx", "fy", "fallen"])
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for t in range(len(trace)):
            w.writerow([t, repr(float(trace.env_u[t, agent])), repr(float(trace.env_v[t, agent])),
                        repr(float(trace.env_r[t, agent])),
                        repr(float(trace.env_phase[t, agent]))]
                       + [repr(float(x)) for x in trace.obs[t, agent]]
                       + [repr(float(x)) for x in trace.actions[t, agent]]
                       + [repr(float(x)) for x in trace.forces[t, agent]]
                       + [int(trace.fallen[t, agent])])
