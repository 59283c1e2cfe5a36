"""Estimator network: optional GRU encoder, tanh dense stack, sigmoid guard
layer and the single-track physics layer.

Parameters live in plain numpy arrays grouped into blocks (one per GRU layer,
one per dense layer).  Training wraps the active blocks in autodiff Tensors
via :func:`track`; frozen blocks stay raw arrays and never enter the graph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .ad import Dual, Tensor
from .dynamics import (COEFF_NAMES, Bounds, EstimatedCoefficients, KnownCoefficients,
                       VehicleState, acceleration)
from .seeding import substream

N_FEATURES = 7
N_COV = 6
CHECKPOINT_FORMAT = "fthd-checkpoint"
CHECKPOINT_VERSION = 1


class FreezeTooDeep(ValueError):
    """Freezing would leave no trainable hidden layer."""


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layers: int = 2
    hidden_size: int = 16
    gru_layers: int = 0
    history: int = 1
    ekf: bool = False

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_size < 1 or self.history < 1:
            raise ValueError("hidden_layers, hidden_size and history must be >= 1")
        if self.gru_layers < 0:
            raise ValueError("gru_layers must be >= 0")

    @property
    def output_size(self):
        return len(COEFF_NAMES) + (N_COV if self.ekf else 0)

    @property
    def n_blocks(self):
        return self.gru_layers + self.hidden_layers + 1


@dataclass
class Block:
    kind: str  # "gru" or "dense"
    arrays: dict
    frozen: bool = False

    def copy(self):
        return Block(self.kind, {k: v.copy() for k, v in self.arrays.items()}, self.frozen)


@dataclass
class ParameterSet:
    config: NetworkConfig
    blocks: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self):
        return ParameterSet(self.config, [b.copy() for b in self.blocks], self.seed,
                            dict(self.meta))

    @property
    def frozen(self):
        return [b.frozen for b in self.blocks]

    def weights(self):
        return [b.arrays for b in self.blocks]

    def n_parameters(self):
        return sum(a.size for b in self.blocks for a in b.arrays.values())

    def flat(self):
        return np.concatenate([a.ravel() for b in self.blocks for a in b.arrays.values()])


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(config, seed=0):
    rng = substream(seed, "init")
    h = config.hidden_size
    blocks = []
    n_in = N_FEATURES
    for _ in range(config.gru_layers):
        blocks.append(Block("gru", {"W": _glorot(rng, n_in, 3 * h), "U": _glorot(rng, h, 3 * h),
                                    "b": np.zeros(3 * h)}))
        n_in = h
    n_in = (h if config.gru_layers else config.history * N_FEATURES) + 1
    for _ in range(config.hidden_layers):
        blocks.append(Block("dense", {"W": _glorot(rng, n_in, h), "b": np.zeros(h)}))
        n_in = h
    out = config.output_size
    blocks.append(Block("dense", {"W": _glorot(rng, n_in, out), "b": np.zeros(out)}))
    return ParameterSet(config, blocks, seed)


def freeze_prefix(params, n):
    """Return a copy with the first ``n`` blocks frozen and the rest active."""
    total = len(params.blocks)
    if n < 0:
        raise ValueError("freeze count must be non-negative")
    if n > total - 2:
        raise FreezeTooDeep(f"freezing {n} of {total} blocks leaves no active hidden layer")
    out = params.copy()
    for i, b in enumerate(out.blocks):
        b.frozen = i < n
    return out


def track(params):
    """Wrap active blocks as gradient-requiring Tensors; frozen blocks stay raw."""
    return [{k: v if b.frozen else Tensor(v, requires_grad=True) for k, v in b.arrays.items()}
            for b in params.blocks]


def backward(loss, tracked):
    """Back-propagate ``loss``; gradients for active blocks, ``None`` for frozen ones."""
    if isinstance(loss, Tensor):
        loss.backward()
    grads = []
    for w in tracked:
        if not any(isinstance(v, Tensor) for v in w.values()):
            grads.append(None)
            continue
        grads.append({k: np.zeros_like(v.data) if v.grad is None else v.grad
                      for k, v in w.items()})
    return grads


# -- forward pass ----------------------------------------------------------

def gru_cell(x, h, w):
    """Gated recurrent update; gates ordered (update, reset, candidate)."""
    n = w["U"].shape[0]
    xw = x @ w["W"] + w["b"]
    hu = h @ w["U"][:, :2 * n]
    z = ad.sigmoid(xw[:, :n] + hu[:, :n])
    r = ad.sigmoid(xw[:, n:2 * n] + hu[:, n:])
    cand = ad.tanh(xw[:, 2 * n:] + (r * h) @ w["U"][:, 2 * n:])
    return (1.0 - z) * h + z * cand


def guard(z, bounds):
    """Squash raw head values into the open box ``(lower, upper)``."""
    lo, hi = bounds.lower, bounds.upper
    out = ad.sigmoid(z) * (hi - lo) + lo
    return ad.clip(out, np.nextafter(lo, hi), np.nextafter(hi, lo))


def encode(history, weights, config):
    """Feature vector fed to the dense stack (before the time feature)."""
    batch = history.shape[0]
    if not config.gru_layers:
        return history.reshape(batch, -1)
    seq = [history[:, k, :] for k in range(history.shape[1])]
    for w in weights[:config.gru_layers]:
        h = np.zeros((batch, config.hidden_size))
        out = []
        for x in seq:
            h = gru_cell(x, h, w)
            out.append(h)
        seq = out
    return seq[-1]


@dataclass
class Prediction:
    head: object  # guard outputs, shape (B, output_size)
    phi: EstimatedCoefficients
    cov: object  # (B, 6) Q/R diagonals in EKF mode, else None
    x_hat: object  # (B, 3) predicted next velocities
    beta: object  # (B, 3) physics-layer accelerations
    dt: object  # (B,) time interval
    dx_dt: object = None  # (B, 3) derivative of x_hat wrt t_next


def _forward(history, t_next, t_now, weights, config, bounds, phi_k):
    """Forward pass; any operand may be a Dual and the outputs follow suit."""
    history = np.asarray(history, dtype=float)
    dt = t_next - t_now
    dt_col = dt.reshape(-1, 1)
    z = ad.concat([encode(history, weights, config), dt_col], axis=-1)
    dense = weights[config.gru_layers:]
    for w in dense[:-1]:
        z = ad.tanh(z @ w["W"] + w["b"])
    head = guard(z @ dense[-1]["W"] + dense[-1]["b"], bounds)
    n = len(COEFF_NAMES)
    phi = EstimatedCoefficients.from_vector(head)
    cov = head[:, n:] if config.ekf else None
    last = history[:, -1, :]
    state = VehicleState(0.0, 0.0, 0.0, last[:, 0], last[:, 1], last[:, 2], last[:, 3], last[:, 4])
    acc = acceleration(state, phi_k, phi)
    beta = ad.stack([acc.ax, acc.ay, acc.omega_dot], axis=-1)
    x_hat = last[:, :3] + beta * dt_col
    return Prediction(head, phi, cov, x_hat, beta, dt)


def _primal(x):
    return x.val if isinstance(x, Dual) else x


def forward(history, t_next, t_now, params, config, bounds, phi_k, time_grad=False):
    """Predict next-step velocities.

    ``params`` is a ParameterSet or the list returned by :func:`track`.
    ``bounds`` covers the whole head (coefficients, then Q/R diagonals in EKF
    mode).  With ``time_grad`` the derivative of ``x_hat`` with respect to
    ``t_next`` is returned in ``dx_dt``.
    """
    weights = params.weights() if isinstance(params, ParameterSet) else params
    t_next = np.asarray(t_next, dtype=float)
    t_now = np.asarray(t_now, dtype=float)
    if time_grad:
        t_next = Dual(t_next, np.ones_like(t_next))
    p = _forward(history, t_next, t_now, weights, config, bounds, phi_k)
    if not time_grad:
        return p
    dx_dt = p.x_hat.tan if p.x_hat.tan is not None else np.zeros(np.shape(ad.value(p.x_hat)))
    phi = EstimatedCoefficients(*(_primal(getattr(p.phi, n)) for n in COEFF_NAMES))
    return Prediction(_primal(p.head), phi, None if p.cov is None else _primal(p.cov),
                      _primal(p.x_hat), _primal(p.beta), _primal(p.dt), dx_dt)


def time_derivative(history, t_next, t_now, params, config, bounds, phi_k):
    """d(x_hat)/d(t_next), shape (B, 3)."""
    return forward(history, t_next, t_now, params, config, bounds, phi_k, time_grad=True).dx_dt


def head_bounds(coeff_bounds, config, cov_bounds=None):
    if not config.ekf:
        return coeff_bounds
    if cov_bounds is None:
        raise ValueError("EKF-mode network needs covariance bounds")
    return coeff_bounds.concat(cov_bounds)


# -- checkpoints -------------------------------------------------------------

def params_to_dict(params, bounds=None, known=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "seed": params.seed,
        "blocks": [{"kind": b.kind, "frozen": b.frozen,
                    "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                               for k, v in b.arrays.items()}}
                   for b in params.blocks],
        "meta": params.meta,
    }
    if bounds is not None:
        doc["bounds"] = bounds.to_dict()
    if known is not None:
        doc["known"] = asdict(known)
    return doc


def params_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an fthd checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = NetworkConfig(**doc["config"])
    blocks = [Block(b["kind"], {k: np.array(a["data"], dtype=float).reshape(a["shape"])
                                for k, a in b["arrays"].items()}, b["frozen"])
              for b in doc["blocks"]]
    params = ParameterSet(config, blocks, doc.get("seed", 0), doc.get("meta", {}))
    reference = init_params(config, 0)
    if [(b.kind, {k: v.shape for k, v in b.arrays.items()}) for b in reference.blocks] != \
            [(b.kind, {k: v.shape for k, v in b.arrays.items()}) for b in params.blocks]:
        raise ValueError("checkpoint blocks do not match its network config")
    bounds = Bounds.from_dict(doc["bounds"]) if "bounds" in doc else None
    known = KnownCoefficients(**doc["known"]) if "known" in doc else None
    return params, bounds, known


def save_checkpoint(path, params, bounds=None, known=None):
    Path(path).write_text(json.dumps(params_to_dict(params, bounds, known)))


def load_checkpoint(path):
    """Return ``(params, bounds, known)``; the last two may be None."""
    return params_from_dict(json.loads(Path(path).read_text()))
