"""Neural and physical perturbation experiments and their metrics."""

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .exceptions import ConfigurationError, UndefinedPhaseError
from .rollout import RolloutTrace, derive_seed, simulate

ANALYSIS_SPEED = 2.0
DEFAULT_WARMUP = 200
TANGENTIAL_MIN = 0.5
ORTHOGONAL_MAX = 0.2


# training-time scheduler ----------------------------------------------------------


@dataclass(frozen=True)
class TrainingPerturbSchedule:
    """Per-agent two-state machine; ``force`` is in body-weight multiples (x, y, z)."""

    p_start: float
    p_stop: float
    magnitude: float
    active: np.ndarray
    force: np.ndarray

    def __post_init__(self):
        if not (0 < self.p_start < 1 and 0 < self.p_stop < 1):
            raise ConfigurationError("p_start and p_stop must lie in (0, 1)")

    @classmethod
    def inactive(cls, batch, p_start=0.01, p_stop=0.02, magnitude=0.23):
        return cls(p_start, p_stop, magnitude, np.zeros(batch, dtype=bool),
                   np.zeros((batch, 3)))


def scheduler_step(sched, rng):
    """Advance every agent's scheduler one step. Returns ``(force, sched')``.

    An inactive agent starts an episode with probability ``p_start`` and
    draws each force axis from ``U[-magnitude, magnitude]``; the force then
    stays frozen until the episode ends, with probability ``p_stop`` per
    subsequent step. The returned force is the one applied this step.
    """
    batch = sched.active.shape[0]
    u = rng.random(batch)
    fresh = rng.uniform(-sched.magnitude, sched.magnitude, (batch, 3))
    start = ~sched.active & (u < sched.p_start)
    stop = sched.active & (u < sched.p_stop)
    active = (sched.active & ~stop) | start
    force = np.where(start[:, None], fresh, sched.force)
    force = np.where(active[:, None], force, 0.0)
    return force, replace(sched, active=active, force=force)


# neural perturbations ---------------------------------------------------------------


@dataclass(frozen=True)
class NeuralPerturbationSpec:
    pc_index: int  # 1-based
    magnitude: float = 2.0  # in standard deviations of that PC
    t_apply: int = DEFAULT_WARMUP
    sign: int = 1

    def __post_init__(self):
        if self.pc_index < 1:
            raise ConfigurationError("pc_index is 1-based")
        if self.sign not in (-1, 1):
            raise ConfigurationError("sign must be +1 or -1")


def pc_direction(basis, pc_index):
    if not 1 <= pc_index <= basis.dim:
        raise ConfigurationError(f"pc_index must be in [1, {basis.dim}]")
    return basis.components[:, pc_index - 1]


def apply_neural_perturbation(s, basis, spec):
    sigma = np.sqrt(basis.variances[spec.pc_index - 1])
    return np.asarray(s, dtype=np.float64) + spec.sign * spec.magnitude * sigma * pc_direction(
        basis, spec.pc_index)


def zero_recurrent_state_perturbation(s):
    return np.zeros_like(np.asarray(s, dtype=np.float64))


def tangentiality(states, t, direction):
    """|cos| between ``direction`` and the state velocity ``s[t+1] - s[t]``."""
    states = np.asarray(states)
    if not 0 <= t < len(states) - 1:
        raise ConfigurationError(f"t={t} needs a successor in a trace of length {len(states)}")
    vel = states[t + 1] - states[t]
    nv, nd = np.linalg.norm(vel), np.linalg.norm(direction)
    if nv == 0 or nd == 0:
        return 0.0
    return float(min(1.0, abs(vel @ direction) / (nv * nd)))


def in_plane_tangentiality(basis, states, t, direction):
    """Same cosine with the velocity restricted to the PC1-PC2 plane."""
    plane = basis.components[:, :2]
    vel = plane @ (plane.T @ (states[t + 1] - states[t]))
    nv, nd = np.linalg.norm(vel), np.linalg.norm(direction)
    if nv == 0 or nd == 0:
        return 0.0
    return float(min(1.0, abs(vel @ direction) / (nv * nd)))


def gait_period(signal, min_lag=2):
    """Dominant period (in samples) from the autocorrelation's first peak."""
    x = np.asarray(signal, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:n]
    if ac[0] <= 0:
        raise UndefinedPhaseError("constant signal has no period")
    ac = ac / ac[0]
    neg = np.nonzero(ac[min_lag:] < 0)[0]
    if neg.size == 0:
        raise UndefinedPhaseError("autocorrelation never crosses zero")
    start = min_lag + neg[0]
    stop = max(start + 1, n // 2)
    return int(start + np.argmax(ac[start:stop]))


def phase_shift(basis, nominal, perturbed, t_from, min_radius=1e-6):
    """Circular-mean PC1-PC2 phase offset of ``perturbed`` vs ``nominal`` from ``t_from`` on.

    Phases are angles of the projections centred on the nominal window's
    mean. Result lies in (-pi, pi].
    """
    zn = _proj2(basis, nominal[t_from:])
    zp = _proj2(basis, perturbed[t_from:])
    if len(zn) == 0:
        raise ConfigurationError("phase window is empty")
    centre = zn.mean(axis=0)
    zn, zp = zn - centre, zp - centre
    radius = np.median(np.hypot(zn[:, 0], zn[:, 1]))
    if radius < min_radius:
        raise UndefinedPhaseError(f"PC1-PC2 cycle radius {radius:.3g} is below {min_radius}")
    diff = np.arctan2(zp[:, 1], zp[:, 0]) - np.arctan2(zn[:, 1], zn[:, 0])
    m = np.mean(np.exp(1j * diff))
    if m == 0:
        return 0.0
    out = float(np.angle(m))
    return np.pi if out == -np.pi else out


def _proj2(basis, states):
    return (np.asarray(states) - basis.mean) @ basis.components[:, :2]


@dataclass
class TracePair:
    nominal: RolloutTrace
    perturbed: RolloutTrace
    spec: object
    metrics: dict = field(default_factory=dict)


def neural_perturbation_experiment(net, env_cfg, basis, spec, steps, seed=0,
                                   speed=ANALYSIS_SPEED, warmup=DEFAULT_WARMUP,
                                   settle_steps=None):
    """Paired noise-free rollouts with and without a PC-direction state jump."""
    if spec.t_apply < warmup:
        raise ConfigurationError("t_apply must not precede the warmup")
    if spec.t_apply >= steps - 1:
        raise ConfigurationError("t_apply must leave room for a response")
    cfg = env_cfg.without_noise()
    phase0 = np.random.default_rng(derive_seed(seed, 0)).uniform(0, 2 * np.pi)
    nominal = simulate(net, cfg, [speed], steps, phase0=phase0)
    perturbed = simulate(net, cfg, [speed], steps, phase0=phase0, neural_event=(
        spec.t_apply, lambda s: apply_neural_perturbation(s, basis, spec)))
    sn, sp = nominal.states[:, 0], perturbed.states[:, 0]
    if settle_steps is None:
        settle_steps = gait_period(_proj2(basis, sn[warmup:])[:, 0])
    direction = pc_direction(basis, spec.pc_index)
    metrics = {
        "max_deviation": float(np.max(np.linalg.norm(sp[spec.t_apply:] - sn[spec.t_apply:],
                                                      axis=1))),
        "settle_steps": int(settle_steps),
        "tangentiality_at_apply": tangentiality(sn, spec.t_apply, direction),
        "in_plane_tangentiality_at_apply": in_plane_tangentiality(basis, sn, spec.t_apply,
                                                                  direction),
        "nominal_fell": bool(nominal.fallen[-1, 0]),
        "perturbed_fell": bool(perturbed.fallen[-1, 0]),
    }
    t_from = spec.t_apply + settle_steps
    if t_from >= steps:
        raise ConfigurationError("trace too short for the settle window")
    metrics["phase_shift_rad"] = phase_shift(basis, sn, sp, t_from)
    return TracePair(nominal, perturbed, spec, metrics)


def classify_tangentiality(value):
    if value >= TANGENTIAL_MIN:
        return "tangential"
    if value <= ORTHOGONAL_MAX:
        return "orthogonal"
    return "unclassified"


def tangential_and_orthogonal_times(net, env_cfg, basis, pc_index=1, steps=None, seed=0,
                                    speed=ANALYSIS_SPEED, warmup=DEFAULT_WARMUP):
    """Most and least tangential application steps within one gait period after warmup."""
    cfg = env_cfg.without_noise()
    phase0 = np.random.default_rng(derive_seed(seed, 0)).uniform(0, 2 * np.pi)
    probe = steps or warmup + 400
    tr = simulate(net, cfg, [speed], probe, phase0=phase0)
    s = tr.states[:, 0]
    period = gait_period(_proj2(basis, s[warmup:])[:, 0])
    direction = pc_direction(basis, pc_index)
    window = np.arange(warmup, warmup + period)
    tang = np.array([tangentiality(s, t, direction) for t in window])
    return int(window[np.argmax(tang)]), int(window[np.argmin(tang)]), period


def write_trace_pair_csv(path, basis, pair, header=None, k=4):
    zn = (pair.nominal.states[:, 0] - basis.mean) @ basis.components[:, :k]
    zp = (pair.perturbed.states[:, 0] - basis.mean) @ basis.components[:, :k]
    fn = pair.nominal.forces[:, 0]
    fp = pair.perturbed.forces[:, 0]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"pc{i + 1}_nominal" for i in range(k)]
                   + [f"pc{i + 1}_perturbed" for i in range(k)] + ["applied_force"])
        for t in range(len(zn)):
            applied = float(np.hypot(*fp[t])) - float(np.hypot(*fn[t]))
            w.writerow([t] + [repr(float(x)) for x in zn[t]] + [repr(float(x)) for x in zp[t]]
                       + [repr(applied)])


# physical perturbations --------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalPerturbationSpec:
    magnitude: float  # lateral force in body-weight multiples
    duration_ms: float = 100.0
    t_apply: int = DEFAULT_WARMUP

    def __post_init__(self):
        if not np.isfinite(self.magnitude):
            raise ConfigurationError("magnitude must be finite")
        if self.duration_ms < 0:
            raise ConfigurationError("duration must be non-negative")


@dataclass(frozen=True)
class RecoveryCriterion:
    band: float = 0.2  # fraction of commanded speed
    sustain_steps: int = 100
    horizon_steps: int = 1000


@dataclass
class TrialResult:
    recovered: bool
    trace: RolloutTrace


def _recovered(trace, agent, end, crit):
    if trace.fallen[-1, agent] or (trace.aborted is not None and trace.aborted[agent]):
        return False
    u = trace.env_u[end:end + crit.horizon_steps, agent]
    ok = np.abs(u - trace.u_cmd[agent]) < crit.band * trace.u_cmd[agent]
    run = 0
    for flag in ok:
        run = run + 1 if flag else 0
        if run >= crit.sustain_steps:
            return True
    return False


def _agent_setup(seed, env_cfg, speed, warmup):
    rng = np.random.default_rng(seed)
    phase0 = rng.uniform(0, 2 * np.pi)
    period = int(round(float(env_cfg.gait_period_steps(speed))))
    offset = int(rng.integers(0, period))
    return phase0, warmup + offset


def run_physical_trials(net, env_cfg, magnitude, duration_ms, seeds, speed=ANALYSIS_SPEED,
                        warmup=DEFAULT_WARMUP, criterion=RecoveryCriterion(), driver="student",
                        t_apply=None):
    """Batched lateral-push trials, one agent per seed. Returns (recovered, trace)."""
    cfg = env_cfg.without_noise()
    setups = [_agent_setup(s, cfg, speed, warmup) for s in seeds]
    phase0 = np.array([p for p, _ in setups])
    starts = np.array([t if t_apply is None else t_apply for _, t in setups])
    n_push = int(round(duration_ms / (1000.0 * cfg.dt)))
    steps = int(starts.max()) + n_push + criterion.horizon_steps
    force = np.zeros((steps, len(seeds), 2))
    for a, t0 in enumerate(starts):
        force[t0:t0 + n_push, a, 1] = magnitude * cfg.body_weight
    trace = simulate(net, cfg, np.full(len(seeds), speed), steps, phase0=phase0, force=force,
                     driver=driver)
    recovered = np.array([_recovered(trace, a, t0 + n_push, criterion)
                          for a, t0 in enumerate(starts)])
    return recovered, trace


def physical_perturbation_trial(net, env_cfg, spec, seed, speed=ANALYSIS_SPEED,
                                criterion=RecoveryCriterion(), driver="student"):
    rec, trace = run_physical_trials(net, env_cfg, spec.magnitude, spec.duration_ms, [seed],
                                     speed, criterion=criterion, driver=driver,
                                     t_apply=spec.t_apply)
    return TrialResult(bool(rec[0]), trace)


def default_magnitudes(n=17, limit=4.0):
    return tuple(float(x) for x in np.linspace(-limit, limit, n))


def _grid_cell(net, env_cfg, mi, di, magnitude, duration, n_agents, master_seed, criterion,
               driver):
    seeds = [derive_seed(master_seed, mi, di, a) for a in range(n_agents)]
    rec, _ = run_physical_trials(net, env_cfg, magnitude, duration, seeds,
                                 criterion=criterion, driver=driver)
    return (mi, di), int(rec.sum())


def robustness_grid(net, env_cfg, magnitudes=None, durations=(100.0, 200.0), n_agents=100,
                    master_seed=0, n_jobs=1, criterion=RecoveryCriterion(), driver="student"):
    """Recovery fractions per (magnitude, duration), each agent seeded by its grid key."""
    if n_agents < 1:
        raise ConfigurationError("n_agents must be >= 1")
    magnitudes = default_magnitudes() if magnitudes is None else tuple(magnitudes)
    jobs = [(mi, di, m, d) for mi, m in enumerate(magnitudes) for di, d in enumerate(durations)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_grid_cell)(net, env_cfg, mi, di, m, d, n_agents, master_seed, criterion, driver)
        for mi, di, m, d in jobs)
    counts = dict(results)
    rows = []
    for mi, di, m, d in jobs:
        k = counts[(mi, di)]
        rows.append({"magnitude_bw": float(m), "duration_ms": float(d), "n_agents": n_agents,
                     "n_recovered": k, "fraction": k / n_agents})
    return rows


def write_grid_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["magnitude_bw", "duration_ms", "n_agents", "n_recovered", "fraction"])
        for r in rows:
            w.writerow([repr(r["magnitude_bw"]), repr(r["duration_ms"]), r["n_agents"],
                        r["n_recovered"], repr(r["fraction"])])
