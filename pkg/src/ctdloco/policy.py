"""MLP -> LSTM -> linear policy with exact forward dynamics and Jacobians.

The recurrent state is always laid out as ``[h; c]`` (length ``2 * n_cells``).
LSTM gate blocks are stacked in the order input, forget, cell, output, so
rows ``k*n:(k+1)*n`` of ``w_ih``, ``w_hh`` and ``b`` belong to gate ``k``.

Every function accepts either a single vector or a leading batch axis.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError, WeightFileError
from .validation import check_finite, check_vector

FORMAT_VERSION = 1
GATE_ORDER = ("input", "forget", "cell", "output")


def sigmoid(z):
    # split form avoids overflow warnings for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class PolicyDims:
    d_obs: int = 12
    mlp_widths: tuple = (32, 24)
    n_cells: int = 32
    d_act: int = 4

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if min((self.d_obs, self.n_cells, self.d_act) + self.mlp_widths) < 1:
            raise ConfigurationError(f"all dimensions must be >= 1: {self}")

    @property
    def d_in(self):
        """Width of the LSTM input (last MLP layer, or d_obs without an MLP)."""
        return self.mlp_widths[-1] if self.mlp_widths else self.d_obs

    @property
    def state_size(self):
        return 2 * self.n_cells

    def to_dict(self):
        return {
            "d_obs": self.d_obs,
            "mlp_widths": list(self.mlp_widths),
            "n_cells": self.n_cells,
            "d_act": self.d_act,
        }


class RecurrentState(NamedTuple):
    h: np.ndarray
    c: np.ndarray

    def as_vector(self):
        return np.concatenate([self.h, self.c], axis=-1)

    @classmethod
    def from_vector(cls, s):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] % 2:
            raise ConfigurationError(f"state length {s.shape[-1]} is odd")
        n = s.shape[-1] // 2
        return cls(s[..., :n], s[..., n:])

    @classmethod
    def zeros(cls, n_cells, batch=None):
        shape = (n_cells,) if batch is None else (batch, n_cells)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True, eq=False)
class PolicyNet:
    dims: PolicyDims
    mlp: tuple  # of (w, b) with w shaped (out, in)
    w_ih: np.ndarray
    w_hh: np.ndarray
    b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    def __post_init__(self):
        d = self.dims
        mlp = tuple((np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))
                    for w, b in self.mlp)
        object.__setattr__(self, "mlp", mlp)
        for name in ("w_ih", "w_hh", "b", "fc_w", "fc_b"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        if len(mlp) != len(d.mlp_widths):
            raise ConfigurationError(
                f"{len(mlp)} MLP layers given, dims declare {len(d.mlp_widths)}")
        fan_in = d.d_obs
        for k, ((w, bias), width) in enumerate(zip(mlp, d.mlp_widths)):
            _expect(w, (width, fan_in), f"mlp[{k}].w")
            _expect(bias, (width,), f"mlp[{k}].b")
            fan_in = width
        n = d.n_cells
        _expect(self.w_ih, (4 * n, d.d_in), "lstm.w_ih")
        _expect(self.w_hh, (4 * n, n), "lstm.w_hh")
        _expect(self.b, (4 * n,), "lstm.b")
        _expect(self.fc_w, (d.d_act, n), "fc.w")
        _expect(self.fc_b, (d.d_act,), "fc.b")
        for arr in self.parameters():
            arr.flags.writeable = False

    # construction -----------------------------------------------------------

    @classmethod
    def random(cls, dims=None, seed=0, scale=1.0, forget_bias=1.0, zero_bias=False):
        """Glorot-style random weights; ``scale`` multiplies every weight matrix."""
        dims = dims or PolicyDims()
        rng = np.random.default_rng(seed)
        mlp = []
        fan_in = dims.d_obs
        for width in dims.mlp_widths:
            w = rng.normal(0.0, scale * np.sqrt(1.0 / fan_in), (width, fan_in))
            b = np.zeros(width) if zero_bias else rng.normal(0.0, 0.1 * scale, width)
            mlp.append((w, b))
            fan_in = width
        n = dims.n_cells
        w_ih = rng.normal(0.0, scale * np.sqrt(1.0 / dims.d_in), (4 * n, dims.d_in))
        w_hh = rng.normal(0.0, scale * np.sqrt(1.0 / n), (4 * n, n))
        b = np.zeros(4 * n)
        if not zero_bias:
            b[n:2 * n] = forget_bias
        fc_w = rng.normal(0.0, scale * np.sqrt(1.0 / n), (dims.d_act, n))
        fc_b = np.zeros(dims.d_act)
        return cls(dims, tuple(mlp), w_ih, w_hh, b, fc_w, fc_b)

    @classmethod
    def zeros(cls, dims=None):
        dims = dims or PolicyDims()
        return cls.from_parameters(dims, [np.zeros(s) for s in parameter_shapes(dims)])

    @classmethod
    def from_parameters(cls, dims, params):
        """Inverse of :meth:`parameters`."""
        params = list(params)
        k = len(dims.mlp_widths)
        if len(params) != 2 * k + 5:
            raise ConfigurationError(f"expected {2 * k + 5} parameter arrays, got {len(params)}")
        mlp = tuple((params[2 * i], params[2 * i + 1]) for i in range(k))
        return cls(dims, mlp, *params[2 * k:])

    def parameters(self):
        """Flat list of weight arrays in canonical order."""
        out = []
        for w, b in self.mlp:
            out += [w, b]
        return out + [self.w_ih, self.w_hh, self.b, self.fc_w, self.fc_b]

    def replace(self, **changes):
        kwargs = {name: getattr(self, name)
                  for name in ("dims", "mlp", "w_ih", "w_hh", "b", "fc_w", "fc_b")}
        kwargs.update(changes)
        return PolicyNet(**kwargs)

    # dynamics ---------------------------------------------------------------

    def mlp_forward(self, obs):
        x = check_vector(obs, self.dims.d_obs, "obs", allow_batch=True)
        for w, b in self.mlp:
            x = np.tanh(x @ w.T + b)
        return x

    def lstm_step(self, x, h, c):
        """One LSTM update. Returns ``(h', c')``."""
        x = check_vector(x, self.dims.d_in, "lstm input", allow_batch=True)
        check_finite(x, "lstm input")
        return _lstm_cache(self, x, h, c)[-2:]

    def step(self, obs, state):
        """Policy step: returns ``(action, RecurrentState)``."""
        x = self.mlp_forward(obs)
        h, c = self.lstm_step(x, state.h, state.c)
        return self.act(h), RecurrentState(h, c)

    def act(self, h):
        return h @ self.fc_w.T + self.fc_b

    def state_map(self, s, x):
        """The recurrent map F(s, x) on concatenated states."""
        h, c = RecurrentState.from_vector(s)
        h2, c2 = self.lstm_step(x, h, c)
        return np.concatenate([h2, c2], axis=-1)


def parameter_shapes(dims):
    shapes = []
    fan_in = dims.d_obs
    for width in dims.mlp_widths:
        shapes += [(width, fan_in), (width,)]
        fan_in = width
    n = dims.n_cells
    return shapes + [(4 * n, dims.d_in), (4 * n, n), (4 * n,), (dims.d_act, n), (dims.d_act,)]


def _expect(arr, shape, name):
    if arr.shape != tuple(shape):
        raise ConfigurationError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


def _gates(net, x, h):
    n = net.dims.n_cells
    z = x @ net.w_ih.T + h @ net.w_hh.T + net.b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    g = np.tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:])
    return i, f, g, o


def _lstm_cache(net, x, h, c):
    i, f, g, o = _gates(net, x, h)
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return i, f, g, o, tc, h2, c2


def recurrent_jacobian(net, s, x):
    """Analytic Jacobian d[h'; c'] / d[h; c] at fixed LSTM input ``x``.

    ``s`` may carry a batch axis, in which case the result is (batch, 2n, 2n).
    """
    n = net.dims.n_cells
    s = check_vector(s, 2 * n, "state", allow_batch=True)
    h, c = RecurrentState.from_vector(s)
    i, f, g, o, tc, _, _ = _lstm_cache(net, x, h, c)
    w_i, w_f, w_g, w_o = (net.w_hh[k * n:(k + 1) * n] for k in range(4))
    # d c'/d h = diag(c f(1-f)) W_f + diag(g i(1-i)) W_i + diag(i (1-g^2)) W_g
    dc_dh = ((c * f * (1 - f))[..., :, None] * w_f
             + (g * i * (1 - i))[..., :, None] * w_i
             + (i * (1 - g * g))[..., :, None] * w_g)
    dtc = o * (1 - tc * tc)
    dh_dh = (tc * o * (1 - o))[..., :, None] * w_o + dtc[..., :, None] * dc_dh
    eye = np.eye(n)
    dh_dc = (dtc * f)[..., :, None] * eye
    dc_dc = f[..., :, None] * eye
    top = np.concatenate([dh_dh, dh_dc], axis=-1)
    bottom = np.concatenate([dc_dh, dc_dc], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def recurrent_vjp(net, s, x, v):
    """``J(s)^T v`` without materialising the Jacobian."""
    n = net.dims.n_cells
    h, c = RecurrentState.from_vector(s)
    i, f, g, o, tc, _, _ = _lstm_cache(net, x, h, c)
    vh, vc = v[..., :n], v[..., n:]
    dc2 = vc + vh * o * (1 - tc * tc)
    dz = np.concatenate([
        dc2 * g * i * (1 - i),
        dc2 * c * f * (1 - f),
        dc2 * i * (1 - g * g),
        vh * tc * o * (1 - o),
    ], axis=-1)
    return np.concatenate([dz @ net.w_hh, dc2 * f], axis=-1)


# serialization ----------------------------------------------------------------


def _matrix(a):
    return np.asarray(a).tolist()


def weights_to_dict(net):
    return {
        "format_version": FORMAT_VERSION,
        "dims": net.dims.to_dict(),
        "gate_order": list(GATE_ORDER),
        "mlp": [{"w": _matrix(w), "b": _matrix(b)} for w, b in net.mlp],
        "lstm": {"w_ih": _matrix(net.w_ih), "w_hh": _matrix(net.w_hh), "b": _matrix(net.b)},
        "fc": {"w": _matrix(net.fc_w), "b": _matrix(net.fc_b)},
    }


def weights_from_dict(doc):
    try:
        version = doc["format_version"]
        if version != FORMAT_VERSION:
            raise WeightFileError(f"unsupported format_version {version!r}")
        d = doc["dims"]
        dims = PolicyDims(int(d["d_obs"]), tuple(d["mlp_widths"]), int(d["n_cells"]),
                          int(d["d_act"]))
        if tuple(doc.get("gate_order", GATE_ORDER)) != GATE_ORDER:
            raise WeightFileError(f"unsupported gate order {doc['gate_order']!r}")
        mlp = tuple((np.array(layer["w"], dtype=np.float64).reshape(len(layer["w"]), -1),
                     np.array(layer["b"], dtype=np.float64)) for layer in doc["mlp"])
        lstm, fc = doc["lstm"], doc["fc"]
        arrays = [np.array(a, dtype=np.float64)
                  for a in (lstm["w_ih"], lstm["w_hh"], lstm["b"], fc["w"], fc["b"])]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (WeightFileError, ConfigurationError)):
            raise
        raise WeightFileError(f"malformed weight document: {exc!r}") from exc
    return PolicyNet(dims, mlp, *arrays)


def dumps_weights(net):
    return json.dumps(weights_to_dict(net))


def save_weights(net, path):
    with open(path, "w") as fh:
        fh.write(dumps_weights(net))


def load_weights(path):
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"{path}: not valid JSON ({exc})") from exc
    return weights_from_dict(doc)
