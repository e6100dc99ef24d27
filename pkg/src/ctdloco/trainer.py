"""Closed-loop imitation of the teacher with truncated BPTT.

The student drives the env while the teacher labels every step. The
recorded sequence is cut into consecutive windows of ``k_trunc`` steps; each
window starts from the recurrent state stored during the rollout, which is
treated as a constant, so no gradient crosses a window boundary.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import env as envmod
from .exceptions import ConfigurationError, NumericError
from .perturbation import TrainingPerturbSchedule, scheduler_step
from .policy import PolicyDims, PolicyNet, RecurrentState, _lstm_cache
from .rollout import simulate

log = logging.getLogger(__name__)


# gradients ---------------------------------------------------------------------


def _forward_window(net, obs, h, c):
    caches = []
    for t in range(obs.shape[0]):
        acts = [obs[t]]
        for w, b in net.mlp:
            acts.append(np.tanh(acts[-1] @ w.T + b))
        i, f, g, o, tc, h2, c2 = _lstm_cache(net, acts[-1], h, c)
        action = h2 @ net.fc_w.T + net.fc_b
        caches.append((acts, h, c, i, f, g, o, tc, h2, action))
        h, c = h2, c2
    return caches


def tbptt_gradients(net, obs, targets, state0, loss_weights=None, norm=None):
    """Exact gradients of the squared action error over one window.

    ``obs`` is (k, B, d_obs) or (k, d_obs), ``targets`` matches with d_act,
    ``state0`` is the (B, 2n) or (2n,) state at the window start and gets no
    gradient. The loss is ``sum(w * (a - target)^2) / norm`` where ``w`` is
    ``loss_weights`` broadcast over action channels (default 1) and ``norm``
    defaults to the number of action entries.

    Returns ``(loss, grads, d_obs)`` with ``grads`` in
    :meth:`PolicyNet.parameters` order.
    """
    obs = np.asarray(obs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    squeeze = obs.ndim == 2
    if squeeze:
        obs, targets = obs[:, None], targets[:, None]
        state0 = np.asarray(state0)[None]
    k, batch = obs.shape[:2]
    if targets.shape != (k, batch, net.dims.d_act):
        raise ConfigurationError(f"targets shape {targets.shape} does not match obs {obs.shape}")
    weights = np.ones((k, batch)) if loss_weights is None else np.asarray(loss_weights, float)
    weights = weights.reshape(k, batch)
    if norm is None:
        norm = targets.size
    n = net.dims.n_cells
    h0, c0 = RecurrentState.from_vector(state0)
    caches = _forward_window(net, obs, h0, c0)

    grads = [np.zeros_like(p) for p in net.parameters()]
    n_mlp = len(net.mlp)
    g_wih, g_whh, g_b, g_fcw, g_fcb = grads[2 * n_mlp:]
    d_obs = np.zeros_like(obs)
    loss = 0.0
    dh_next = np.zeros((batch, n))
    dc_next = np.zeros((batch, n))
    for t in range(k - 1, -1, -1):
        acts, h, c, i, f, g, o, tc, h2, action = caches[t]
        resid = action - targets[t]
        wt = weights[t][:, None]
        loss += float(np.sum(wt * resid * resid))
        da = 2.0 * wt * resid / norm
        g_fcw += da.T @ h2
        g_fcb += da.sum(axis=0)
        dh = da @ net.fc_w + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1 - i),
            dc * c * f * (1 - f),
            dc * i * (1 - g * g),
            dh * tc * o * (1 - o),
        ], axis=-1)
        g_wih += dz.T @ acts[-1]
        g_whh += dz.T @ h
        g_b += dz.sum(axis=0)
        dh_next = dz @ net.w_hh
        dc_next = dc * f
        dx = dz @ net.w_ih
        for layer in range(n_mlp - 1, -1, -1):
            w, _ = net.mlp[layer]
            y = acts[layer + 1]
            dpre = dx * (1 - y * y)
            grads[2 * layer] += dpre.T @ acts[layer]
            grads[2 * layer + 1] += dpre.sum(axis=0)
            dx = dpre @ w
        d_obs[t] = dx
    loss /= norm
    if squeeze:
        d_obs = d_obs[:, 0]
    return loss, grads, d_obs


def sequence_gradients(net, obs, targets, states, k_trunc, loss_weights=None):
    """Sum window gradients over a recorded (L, B, ...) sequence.

    Window ``j`` covers steps ``[j k, (j+1) k)`` and starts from the recorded
    ``states[j k]``. The loss is normalised over the full sequence.
    """
    length = obs.shape[0]
    if k_trunc < 1:
        raise ConfigurationError("k_trunc must be >= 1")
    norm = targets.size
    total_loss = 0.0
    total = [np.zeros_like(p) for p in net.parameters()]
    d_obs = np.zeros_like(obs)
    for start in range(0, length, k_trunc):
        sl = slice(start, min(start + k_trunc, length))
        w = None if loss_weights is None else loss_weights[sl]
        loss, grads, dob = tbptt_gradients(net, obs[sl], targets[sl], states[start], w, norm)
        total_loss += loss
        for acc, g in zip(total, grads):
            acc += g
        d_obs[sl] = dob
    return total_loss, total, d_obs


# Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam step. Returns new ``(params, state)``; inputs untouched.

    ``lr`` may be an array broadcastable against each parameter.
    """
    b1, b2 = betas
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# training loop ------------------------------------------------------------------


@dataclass
class TrainConfig:
    k_trunc: int = 16
    epochs: int = 1500
    rollout_steps: int = 64
    episode_steps: int = 512
    batch: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_minibatches: int = 4
    grad_clip: float = 1.0
    seed: int = 0
    speed_range: tuple = (0.8, 2.0)
    teacher_forcing_epochs: int = 300
    obs_noise: float = 0.01
    perturb_during_training: bool = False
    p_start: float = 0.01
    p_stop: float = 0.02
    perturb_magnitude: float = 0.23
    dims: dict = field(default_factory=lambda: PolicyDims().to_dict())

    def __post_init__(self):
        if self.k_trunc < 1:
            raise ConfigurationError("k_trunc must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.rollout_steps % self.n_minibatches:
            raise ConfigurationError("rollout_steps must be divisible by n_minibatches")
        self.betas = tuple(self.betas)
        self.speed_range = tuple(self.speed_range)

    def policy_dims(self):
        d = self.dims
        return PolicyDims(d["d_obs"], tuple(d["mlp_widths"]), d["n_cells"], d["d_act"])

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["speed_range"] = list(self.speed_range)
        return d


@dataclass
class TrainReport:
    loss_curve: list
    initial_heldout_loss: float
    final_heldout_loss: float
    tracking_error: float
    checkpoints: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def heldout_loss(net, env_cfg, seed, steps=400, speeds=(0.8, 1.2, 1.6, 2.0)):
    """Mean squared student-vs-teacher action error on student-driven rollouts."""
    rng = np.random.default_rng(seed)
    phase0 = rng.uniform(0, 2 * np.pi, len(speeds))
    tr = simulate(net, env_cfg.without_noise(), np.array(speeds), steps, phase0=phase0)
    target = envmod.teacher_action(tr.obs, tr.env_phase)
    return float(np.mean((tr.actions - target) ** 2))


def tracking_error(net, env_cfg, steps=1000, warmup=200, speeds=(0.8, 1.2, 1.6, 2.0)):
    tr = simulate(net, env_cfg.without_noise(), np.array(speeds), steps)
    return float(np.mean(np.abs(tr.env_u[warmup:] - tr.u_cmd)))


class _TrainingEnv:
    """Persistent batch of env instances that resets each agent per episode."""

    def __init__(self, cfg, env_cfg, rng):
        self.cfg, self.env_cfg, self.rng = cfg, env_cfg, rng
        b = cfg.batch
        self.state = envmod.reset(env_cfg, np.zeros(b), batch=b)
        self.s = np.zeros((b, 2 * cfg.policy_dims().n_cells))
        self.age = np.zeros(b, dtype=np.int64)
        self.sched = TrainingPerturbSchedule.inactive(b, cfg.p_start, cfg.p_stop,
                                                      cfg.perturb_magnitude)
        self._reset(np.ones(b, dtype=bool))
        # stagger episode ends so resets do not all coincide
        self.age[:] = np.arange(b) * cfg.episode_steps // b

    def _reset(self, mask):
        k = int(mask.sum())
        lo, hi = self.cfg.speed_range
        fresh = envmod.reset(self.env_cfg, self.rng.uniform(lo, hi, k),
                             phase=self.rng.uniform(0, 2 * np.pi, k), batch=k)
        fields = {}
        for name in ("u", "v", "r", "gait_phase", "step_count", "u_cmd", "v_cmd", "r_cmd",
                     "prev_action", "fall_count"):
            arr = np.array(getattr(self.state, name), copy=True)
            arr[mask] = getattr(fresh, name)
            fields[name] = arr
        self.state = envmod.EnvState(**fields)
        self.s[mask] = 0.0
        self.age[mask] = 0

    def collect(self, net, steps, beta):
        cfg, env_cfg = self.cfg, self.env_cfg
        obs_l, tgt_l, st_l = [], [], []
        for _ in range(steps):
            obs = envmod.observe(self.state, env_cfg, self.rng)
            target = envmod.teacher_action(obs, self.state.gait_phase)
            action, st = net.step(obs, RecurrentState.from_vector(self.s))
            if not np.all(np.isfinite(action)):
                raise NumericError("student produced a non-finite action during training")
            use_teacher = self.rng.random(cfg.batch) < beta
            drive = np.where(use_teacher[:, None], target, action)
            obs_l.append(obs)
            tgt_l.append(target)
            st_l.append(self.s)
            if cfg.perturb_during_training:
                f3, self.sched = scheduler_step(self.sched, self.rng)
                force = f3[:, :2] * env_cfg.body_weight
            else:
                force = np.zeros((cfg.batch, 2))
            self.state, _ = envmod.env_step(self.state, drive, force, env_cfg, self.rng)
            self.s = st.as_vector()
            self.age += 1
            done = (self.age >= cfg.episode_steps) | envmod.is_fallen(self.state, env_cfg)
            if done.any():
                self._reset(done)
        return np.array(obs_l), np.array(tgt_l), np.array(st_l)


def train(init, env_cfg, cfg):
    """Train ``init`` by truncated-BPTT imitation. Returns ``(net, TrainReport)``."""
    dims = cfg.policy_dims()
    if init.dims != dims:
        raise ConfigurationError(f"initial net dims {init.dims} != config dims {dims}")
    rng = np.random.default_rng(cfg.seed)
    noisy = dataclasses.replace(env_cfg, noise_std=(cfg.obs_noise,) * envmod.D_OBS)
    world = _TrainingEnv(cfg, noisy, rng)
    net = init
    opt = AdamState.zeros_like(net.parameters())
    initial = heldout_loss(net, env_cfg, seed=cfg.seed + 10_000)
    curve = []
    for epoch in range(cfg.epochs):
        beta = max(0.0, 1.0 - epoch / cfg.teacher_forcing_epochs) if cfg.teacher_forcing_epochs else 0.0
        obs, tgt, states = world.collect(net, cfg.rollout_steps, beta)
        epoch_loss = 0.0
        # equal update count per epoch for every k_trunc keeps budgets matched
        bounds = np.linspace(0, cfg.rollout_steps, cfg.n_minibatches + 1).astype(int)
        for a, b in zip(bounds[:-1], bounds[1:]):
            loss, grads, _ = sequence_gradients(net, obs[a:b], tgt[a:b], states[a:b], cfg.k_trunc)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericError(f"non-finite loss or gradient at epoch {epoch}")
            params, opt = adam_update(net.parameters(), _clip(grads, cfg.grad_clip), opt,
                                      cfg.lr, cfg.betas, cfg.eps)
            net = PolicyNet.from_parameters(dims, params)
            epoch_loss += loss / cfg.n_minibatches
        curve.append(epoch_loss)
        if epoch % 100 == 0:
            log.info("epoch %d loss %.5f", epoch, epoch_loss)
    final = heldout_loss(net, env_cfg, seed=cfg.seed + 10_000)
    report = TrainReport(curve, initial, final, tracking_error(net, env_cfg))
    return net, report


class TBPTTImitationTrainer(BaseEstimator):
    """Estimator wrapper: ``fit(env_cfg)`` trains and stores ``net_``/``report_``."""

    def __init__(self, k_trunc=16, epochs=1500, rollout_steps=64, batch=32, lr=1e-3,
                 seed=0, perturb_during_training=False, init_scale=1.0):
        self.k_trunc = k_trunc
        self.epochs = epochs
        self.rollout_steps = rollout_steps
        self.batch = batch
        self.lr = lr
        self.seed = seed
        self.perturb_during_training = perturb_during_training
        self.init_scale = init_scale

    def fit(self, env_cfg=None, y=None, init=None):
        env_cfg = env_cfg or envmod.EnvConfig()
        cfg = TrainConfig(k_trunc=self.k_trunc, epochs=self.epochs,
                          rollout_steps=self.rollout_steps, batch=self.batch, lr=self.lr,
                          seed=self.seed, perturb_during_training=self.perturb_during_training)
        init = init or PolicyNet.random(cfg.policy_dims(), seed=self.seed, scale=self.init_scale)
        self.net_, self.report_ = train(init, env_cfg, cfg)
        return self

    def predict(self, obs, state=None):
        """Actions for a (T, d_obs) observation sequence from ``state``."""
        state = state or RecurrentState.zeros(self.net_.dims.n_cells)
        out = []
        for o in np.asarray(obs, dtype=np.float64):
            a, state = self.net_.step(o, state)
            out.append(a)
        return np.array(out)
