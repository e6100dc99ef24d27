"""Fixed points of the LSTM recurrent map under a constant input.

Candidates are found by minimising the speed ``q(s) = 0.5 |F(s, x) - s|^2``
with Adam from many initial states, then merged by single-linkage clustering
and classified from the eigenvalues of the recurrent Jacobian.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import AnalysisError, ConfigurationError
from .policy import recurrent_jacobian, recurrent_vjp
from .validation import check_positive, check_vector

ATTRACTOR = "attractor"
SADDLE = "saddle"
MARGINAL = "marginal"


def speed(net, s, x):
    """``0.5 * |F(s, x) - s|^2``; batched over leading axes of ``s``."""
    s = np.asarray(s, dtype=np.float64)
    r = net.state_map(s, x) - s
    return 0.5 * np.sum(r * r, axis=-1)


def speed_gradient(net, s, x):
    """Returns ``(q, grad q)`` with ``grad q = (J - I)^T (F(s) - s)``."""
    r = net.state_map(s, x) - s
    return 0.5 * np.sum(r * r, axis=-1), recurrent_vjp(net, s, x, r) - r


def zero_input_vector(net):
    """LSTM input produced by an all-zero observation (MLP biases leak through)."""
    return net.mlp_forward(np.zeros(net.dims.d_obs))


@dataclass
class FixedPointCandidate:
    state: np.ndarray
    speed: float
    converged: bool
    iterations: int
    diverged: bool = False


@dataclass
class FixedPointReport:
    state: np.ndarray
    speed: float
    eigenvalues: np.ndarray = None  # complex, descending modulus
    klass: str = None
    k_unstable: int = None
    condition: float = None
    n_members: int = 1
    basin_samples: list = field(default_factory=list)

    def to_dict(self):
        return {
            "state": self.state.tolist(),
            "speed": float(self.speed),
            "eigenvalues": None if self.eigenvalues is None else [
                {"re": float(z.real), "im": float(z.imag)} for z in self.eigenvalues],
            "class": self.klass,
            "k_unstable": self.k_unstable,
            "eigvec_condition": self.condition,
            "n_members": self.n_members,
        }


def init_states(n_inits, dim, scheme="box", states=None, inflate=0.25, seed=0):
    """Initial states for the search.

    ``"trajectory-box"`` samples uniformly from the bounding box of
    ``states`` widened by ``inflate`` (0.25 -> 1.25x the width per axis);
    ``"box"`` samples from ``[-1, 1]^dim``.
    """
    rng = np.random.default_rng(seed)
    if scheme == "box":
        lo, hi = -np.ones(dim), np.ones(dim)
    elif scheme == "trajectory-box":
        if states is None or len(states) == 0:
            raise ConfigurationError("trajectory-box initialisation needs recorded states")
        states = np.asarray(states)
        lo, hi = states.min(axis=0), states.max(axis=0)
        pad = 0.5 * inflate * (hi - lo)
        lo, hi = lo - pad, hi + pad
    else:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    return rng.uniform(lo, hi, (n_inits, dim))


def _newton_polish(net, s, x, steps, max_step):
    """Damped Newton on ``F(s) - s = 0``; a step is kept only if q drops."""
    q = float(speed(net, s, x))
    eye = np.eye(s.shape[0])
    for _ in range(steps):
        if q == 0.0:
            break
        r = net.state_map(s, x) - s
        try:
            delta = np.linalg.solve(recurrent_jacobian(net, s, x) - eye, -r)
        except np.linalg.LinAlgError:
            break
        norm = np.linalg.norm(delta)
        if norm > max_step:
            delta *= max_step / norm
        trial = s + delta
        q_trial = float(speed(net, trial, x))
        if not q_trial < q:
            break
        s, q = trial, q_trial
    return s, q


def find_fixed_points(net, x, n_inits=128, lr=0.01, max_iters=20000, q_tol=1e-10,
                      init_scheme="box", states=None, inflate=0.25, seed=0,
                      betas=(0.9, 0.999), eps=1e-8, polish_below=1e-6, newton_steps=20,
                      inits=None, min_lr=1e-9, stall_window=500, stall_rtol=1e-6):
    """Adam on q from each initial state, all runs advanced in lockstep.

    Runs are independent: every quantity is per row, so the batch layout
    does not couple them. A run's learning rate halves whenever its q rises.
    A run stops once q < q_tol, once its rate has decayed below ``min_lr``,
    or when q fell by less than ``stall_rtol`` (relative) over the last
    ``stall_window`` iterations, which is how runs parked on a slow point
    end. Runs ending below ``polish_below`` get a few damped Newton steps,
    each kept only if it lowers q, which pins converged states far below
    q_tol.
    """
    dim = net.dims.state_size
    x = check_vector(x, net.dims.d_in, "input vector")
    check_positive(q_tol, "q_tol")
    if inits is None:
        if n_inits < 1:
            raise ConfigurationError("n_inits must be >= 1")
        inits = init_states(n_inits, dim, init_scheme, states, inflate, seed)
    S = np.array(inits, dtype=np.float64)
    n = S.shape[0]
    b1, b2 = betas
    m = np.zeros_like(S)
    v = np.zeros_like(S)
    rate = np.full(n, float(lr))
    active = np.ones(n, dtype=bool)
    diverged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    q, grad = speed_gradient(net, S, x)
    prev_q = q.copy()
    checkpoint_q = q.copy()
    for it in range(1, max_iters + 1):
        if it % stall_window == 0:
            stalled = q > (1.0 - stall_rtol) * checkpoint_q
            active &= ~stalled
            checkpoint_q = q.copy()
        done = q < q_tol
        bad = ~np.all(np.isfinite(grad), axis=1) | ~np.isfinite(q)
        diverged |= bad & active
        active &= ~done & ~bad & (rate >= min_lr)
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        g = grad[idx]
        m[idx] = b1 * m[idx] + (1 - b1) * g
        v[idx] = b2 * v[idx] + (1 - b2) * g * g
        t = iters[idx] + 1
        mhat = m[idx] / (1 - b1 ** t)[:, None]
        vhat = v[idx] / (1 - b2 ** t)[:, None]
        S[idx] = S[idx] - rate[idx, None] * mhat / (np.sqrt(vhat) + eps)
        iters[idx] = t
        q_new, g_new = speed_gradient(net, S[idx], x)
        rate[idx] = np.where(q_new > prev_q[idx], 0.5 * rate[idx], rate[idx])
        prev_q[idx] = q_new
        q[idx], grad[idx] = q_new, g_new

    out = []
    for k in range(n):
        s, qk = S[k], float(q[k])
        if not diverged[k] and np.isfinite(qk) and qk < polish_below and newton_steps:
            s, qk = _newton_polish(net, s.copy(), x, newton_steps, max_step=0.1)
        ok = bool(np.isfinite(qk) and qk < q_tol and not diverged[k])
        out.append(FixedPointCandidate(s, qk, ok, int(iters[k]), bool(diverged[k])))
    return out


def cluster_candidates(cands, merge_radius=0.1):
    """Single-linkage merge of converged candidates.

    Two candidates share a cluster when a chain of candidates, each within
    ``merge_radius`` of the next, connects them. Candidates are sorted first
    so the outcome does not depend on input order. The representative is the
    member with the lowest speed.
    """
    check_positive(merge_radius, "merge_radius")
    conv = [c for c in cands if c.converged]
    if not conv:
        return []
    conv.sort(key=lambda c: (c.speed, tuple(np.asarray(c.state).tolist())))
    X = np.array([c.state for c in conv])
    parent = list(range(len(conv)))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    for i, j in zip(*np.nonzero(np.triu(d2 <= merge_radius ** 2, k=1))):
        ri, rj = root(i), root(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(len(conv)):
        groups.setdefault(root(i), []).append(i)
    reports = []
    for members in groups.values():
        best = min(members)  # conv is sorted by speed
        reports.append(FixedPointReport(np.array(conv[best].state), conv[best].speed,
                                        n_members=len(members)))
    reports.sort(key=lambda r: (r.speed, tuple(r.state.tolist())))
    return reports


def classify_spectrum(moduli, tol_marginal=0.005):
    """``(class, k_unstable)`` from eigenvalue moduli."""
    moduli = np.asarray(moduli)
    k = int(np.sum(moduli > 1 + tol_marginal))
    top = float(moduli.max())
    if top < 1 - tol_marginal:
        return ATTRACTOR, k
    if top <= 1 + tol_marginal:
        return MARGINAL, k
    return SADDLE, k


def classify(net, x, fp_state, tol_marginal=0.005, q_tol=1e-10):
    fp_state = np.asarray(fp_state, dtype=np.float64)
    q = float(speed(net, fp_state, x))
    if not q < q_tol:
        raise ConfigurationError(f"state is not a fixed point: q = {q:.3g} >= {q_tol}")
    J = recurrent_jacobian(net, fp_state, x)
    try:
        evals, evecs = np.linalg.eig(J)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError(f"eigensolver failed: {exc}") from exc
    order = np.lexsort((np.angle(evals), -np.abs(evals)))
    evals = evals[order]
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(evecs))
    klass, k = classify_spectrum(np.abs(evals), tol_marginal)
    return FixedPointReport(fp_state, q, evals, klass, k, cond)


def unforced_rollout(net, x, s0, steps):
    """States ``s0, F(s0), F(F(s0)), ...`` under constant input; shape (steps + 1, 2n)."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    out = [np.asarray(s0, dtype=np.float64)]
    for _ in range(steps):
        out.append(net.state_map(out[-1], x))
    return np.array(out)


def local_gradient_field(net, x, fp_state, basis, extent=1.0, resolution=11):
    """One-step displacements on a PC1-PC2 grid centred on a fixed point.

    Returns an array (resolution**2, 4) of ``pc1, pc2, dpc1, dpc2`` where the
    first two columns are the grid points' PC coordinates.
    """
    plane = basis.components[:, :2]
    offsets = np.linspace(-extent, extent, resolution)
    a, b = np.meshgrid(offsets, offsets, indexing="ij")
    grid = np.stack([a.ravel(), b.ravel()], axis=1)
    S = np.asarray(fp_state) + grid @ plane.T
    disp = net.state_map(S, x) - S
    coords = (S - basis.mean) @ plane
    return np.concatenate([coords, disp @ plane], axis=1)


class FixedPointFinder(BaseEstimator):
    """Estimator over the find -> cluster -> classify pipeline.

    ``fit(X)`` takes recorded recurrent states (rows) used to place the
    initial states; with ``X=None`` the ``[-1, 1]`` box is used.
    """

    def __init__(self, net=None, input_vector=None, n_inits=128, lr=0.01, max_iters=20000,
                 q_tol=1e-10, merge_radius=0.1, tol_marginal=0.005, inflate=0.25, seed=0):
        self.net = net
        self.input_vector = input_vector
        self.n_inits = n_inits
        self.lr = lr
        self.max_iters = max_iters
        self.q_tol = q_tol
        self.merge_radius = merge_radius
        self.tol_marginal = tol_marginal
        self.inflate = inflate
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.net is None:
            raise ConfigurationError("FixedPointFinder needs a net")
        x = zero_input_vector(self.net) if self.input_vector is None else self.input_vector
        self.input_vector_ = np.asarray(x, dtype=np.float64)
        self.candidates_ = find_fixed_points(
            self.net, self.input_vector_, self.n_inits, self.lr, self.max_iters, self.q_tol,
            "box" if X is None else "trajectory-box", X, self.inflate, self.seed)
        self.fixed_points_ = []
        for rep in cluster_candidates(self.candidates_, self.merge_radius):
            full = classify(self.net, self.input_vector_, rep.state, self.tol_marginal,
                            self.q_tol)
            full.n_members = rep.n_members
            self.fixed_points_.append(full)
        return self

    def summary(self):
        check_is_fitted(self, "fixed_points_")
        counts = {}
        for fp in self.fixed_points_:
            counts[fp.klass] = counts.get(fp.klass, 0) + 1
        return {
            "n_inits": len(self.candidates_),
            "n_converged": sum(c.converged for c in self.candidates_),
            "n_diverged": sum(c.diverged for c in self.candidates_),
            "n_fixed_points": len(self.fixed_points_),
            "class_counts": counts,
        }

    def report_dict(self):
        check_is_fitted(self, "fixed_points_")
        return {
            "input_vector": self.input_vector_.tolist(),
            "candidates_summary": self.summary(),
            "fixed_points": [fp.to_dict() for fp in self.fixed_points_],
        }

    def save_report(self, path, metadata=None):
        doc = self.report_dict()
        if metadata:
            doc = {"metadata": metadata, **doc}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


def write_gradient_field_csv(path, field_rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["pc1", "pc2", "dpc1", "dpc2"])
        for row in field_rows:
            w.writerow([repr(float(v)) for v in row])


def write_decay_csv(path, traj, fp_state, basis, header=None, k=4):
    z = (traj - basis.mean) @ basis.components[:, :k]
    dist = np.linalg.norm(traj - fp_state, axis=1)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"pc{i + 1}" for i in range(k)] + ["dist_to_fp"])
        for t in range(len(traj)):
            w.writerow([t] + [repr(float(v)) for v in z[t]] + [repr(float(dist[t]))])


def write_eigenvalue_csv(path, reports, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["fixed_point", "class", "index", "re", "im", "modulus"])
        for k, rep in enumerate(reports):
            for j, z in enumerate(rep.eigenvalues):
                w.writerow([k, rep.klass, j, repr(float(z.real)), repr(float(z.imag)),
                            repr(float(abs(z)))])
