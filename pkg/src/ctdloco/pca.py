"""Principal components of recurrent-state rollouts across commanded speeds."""

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, NumericError, WeightFileError
from .rollout import derive_seed, simulate
from .validation import check_matrix

DEFAULT_SPEEDS = tuple(np.round(np.arange(0.8, 2.0 + 1e-9, 0.2), 10))
SIGN_CONVENTION = "largest-magnitude entry of each component is positive"


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class RolloutDataset:
    states: np.ndarray  # (rows, 2n)
    rollout_id: np.ndarray
    speed: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.states = check_matrix(self.states, name="states")
        rows = self.states.shape[0]
        for name in ("rollout_id", "speed", "t"):
            if len(getattr(self, name)) != rows:
                raise ConfigurationError(f"metadata column {name} length != {rows} rows")
        if not np.all(np.isfinite(self.states)):
            raise NumericError("dataset contains non-finite states")

    def __len__(self):
        return self.states.shape[0]

    def select_speed(self, speed):
        mask = np.isclose(self.speed, speed)
        return RolloutDataset(self.states[mask], self.rollout_id[mask], self.speed[mask],
                              self.t[mask])

    def to_csv(self, path, header=None):
        n2 = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh)
            w.writerow(["rollout_id", "speed", "t"] + [f"s_{i}" for i in range(n2)])
            for k in range(len(self)):
                w.writerow([int(self.rollout_id[k]), repr(float(self.speed[k])), int(self.t[k])]
                           + [repr(float(x)) for x in self.states[k]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if not rows or rows[0][:3] != ["rollout_id", "speed", "t"]:
            raise WeightFileError(f"{path}: missing dataset header")
        try:
            body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
        except ValueError as exc:
            raise WeightFileError(f"{path}: malformed dataset rows ({exc})") from exc
        return cls(body[:, 3:], body[:, 0].astype(int), body[:, 1], body[:, 2].astype(int))


def collect_rollouts(net, env_cfg, speeds=DEFAULT_SPEEDS, steps=1000, seed=0, warmup=200):
    """One noise-free student rollout per speed, warmup prefix discarded.

    Each rollout starts from a gait phase drawn from a per-rollout derived
    seed. Rollouts whose policy emits a non-finite action are dropped with a
    warning.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.size == 0:
        raise ConfigurationError("speeds must be non-empty")
    if not 0 <= warmup < steps:
        raise ConfigurationError("warmup must lie in [0, steps)")
    phase0 = np.array([np.random.default_rng(derive_seed(seed, k)).uniform(0, 2 * np.pi)
                       for k in range(len(speeds))])
    trace = simulate(net, env_cfg.without_noise(), speeds, steps, phase0=phase0)
    keep = [k for k in range(len(speeds)) if not trace.aborted[k]]
    if len(keep) < len(speeds):
        warnings.warn(f"rollouts {sorted(set(range(len(speeds))) - set(keep))} aborted "
                      "on non-finite actions", RuntimeWarning)
    recorded = steps - warmup
    states = np.concatenate([trace.states[warmup:, k] for k in keep]) if keep else \
        np.zeros((0, trace.states.shape[-1]))
    return RolloutDataset(
        states=states,
        rollout_id=np.repeat(np.array(keep, dtype=int), recorded),
        speed=np.repeat(speeds[keep], recorded),
        t=np.tile(np.arange(warmup, steps), len(keep)),
    )


@dataclass(frozen=True)
class PCBasis:
    mean: np.ndarray
    components: np.ndarray  # columns are PCs, descending variance
    variances: np.ndarray
    rank_deficient: bool = False
    source_hash: str = ""

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def std(self):
        return np.sqrt(self.variances)

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "variances": self.variances.tolist(),
            "sign_convention": SIGN_CONVENTION,
            "rank_deficient": self.rank_deficient,
            "source_hash": self.source_hash,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            mean = np.array(d["mean"], dtype=np.float64)
            comps = np.array(d["components"], dtype=np.float64)
            var = np.array(d["variances"], dtype=np.float64)
        except (KeyError, ValueError, TypeError) as exc:
            raise WeightFileError(f"malformed basis document: {exc!r}") from exc
        if comps.shape != (mean.size, mean.size) or var.shape != mean.shape:
            raise ConfigurationError("basis arrays have inconsistent shapes")
        return cls(mean, comps, var, bool(d.get("rank_deficient", False)),
                   d.get("source_hash", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WeightFileError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def _fix_signs(components):
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def fit_pca(states):
    """PCA by eigendecomposition of the population covariance (1/N).

    The 1/N normalisation makes the mean squared truncation residual equal
    the sum of the discarded variances exactly.
    """
    if isinstance(states, RolloutDataset):
        states = states.states
    X = check_matrix(states, name="states")
    rows, dim = X.shape
    if rows < 1:
        raise ConfigurationError("cannot fit PCA on an empty dataset")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / rows
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # the scale below which eigenvalues are roundoff of a symmetric solve
    floor = max(evals[0], 0.0) * dim * np.finfo(float).eps * 10
    deficient = rows < dim or bool(np.any(evals <= floor))
    evals = np.where(evals <= floor, 0.0, evals)
    if deficient:
        warnings.warn("PCA input is rank deficient; trailing variances set to 0",
                      RankDeficiencyWarning)
    digest = hashlib.sha256(np.ascontiguousarray(X).tobytes()).hexdigest()[:16]
    return PCBasis(mean, _fix_signs(evecs), evals, deficient, digest)


def project(basis, s, k=None):
    k = basis.dim if k is None else k
    if not 1 <= k <= basis.dim:
        raise ConfigurationError(f"k must be in [1, {basis.dim}], got {k}")
    return (np.asarray(s, dtype=np.float64) - basis.mean) @ basis.components[:, :k]


def reconstruct(basis, z, residual=None):
    """Lift k PC coordinates back to state space.

    ``residual`` optionally supplies the discarded coordinates ``k+1..2n``.
    """
    z = np.asarray(z, dtype=np.float64)
    k = z.shape[-1]
    out = basis.mean + z @ basis.components[:, :k].T
    if residual is not None:
        out = out + np.asarray(residual) @ basis.components[:, k:].T
    return out


def explained_variance_report(basis):
    total = basis.variances.sum()
    if total > 0:
        frac = basis.variances / total
    else:
        frac = np.full(basis.dim, 1.0 / basis.dim)
    cum = np.cumsum(frac)
    return [(i + 1, float(f), float(c)) for i, (f, c) in enumerate(zip(frac, cum))]


class RecurrentPCA(BaseEstimator, TransformerMixin):
    """Estimator front end over :func:`fit_pca`; ``transform`` yields PC coordinates."""

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiencyWarning)
            self.basis_ = fit_pca(X)
        self.mean_ = self.basis_.mean
        self.components_ = self.basis_.components
        self.explained_variance_ = self.basis_.variances
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        return project(self.basis_, X, self.n_components)

    def inverse_transform(self, Z):
        check_is_fitted(self, "basis_")
        return reconstruct(self.basis_, Z)
