"""Pretraining, physics-informed fine-tuning and random hyperparameter search."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ekf as _ekf
from .dynamics import COEFF_NAMES, EstimatedCoefficients
from .net import (ParameterSet, _forward, backward, forward, freeze_prefix, head_bounds,
                  init_params, track)
from .seeding import substream

log = logging.getLogger(__name__)

# Default loss mix for fine-tuning; the physics term is tiny next to the fit term.
W1, W2 = 0.99975, 0.00025
FREEZE_FRACTION = 0.75


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvalidBudget(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w1: float = W1
    w2: float = W2

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or not math.isclose(self.w1 + self.w2, 1.0, abs_tol=1e-9):
            raise ValueError("loss weights must be non-negative and sum to 1")


def default_freeze(n_blocks):
    """Three quarters of the blocks, capped so a hidden layer stays trainable."""
    return max(0, min(int(FREEZE_FRACTION * n_blocks), n_blocks - 2))


@dataclass(frozen=True)
class TrainRunConfig:
    iterations: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    freeze: int | None = None  # fine-tuning only; None picks default_freeze
    val_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidBudget("iteration budget must be positive")
        if self.batch_size < 1 or not self.learning_rate > 0 or self.val_every < 1:
            raise ValueError("batch_size, learning_rate and val_every must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainReport:
    phase: str
    config: TrainRunConfig
    train_loss: list = field(default_factory=list)  # one entry per iteration
    val_iterations: list = field(default_factory=list)  # 1-based iteration numbers
    val_loss: list = field(default_factory=list)
    best_iteration: int | None = None
    checkpoint: ParameterSet | None = None  # parameters at the best validation point
    final: ParameterSet | None = None

    @property
    def l_min(self):
        return min(self.val_loss) if self.val_loss else None

    def to_dict(self):
        return {"phase": self.phase, "config": self.config.to_dict(), "l_min": self.l_min,
                "best_iteration": self.best_iteration, "train_loss": self.train_loss,
                "val_iterations": self.val_iterations, "val_loss": self.val_loss}

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_curves(self, path):
        val = dict(zip(self.val_iterations, self.val_loss))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "train_loss", "val_loss"])
            for i, tl in enumerate(self.train_loss, start=1):
                w.writerow([i, repr(float(tl)), repr(float(val[i])) if i in val else ""])


# -- losses ------------------------------------------------------------------

def mse(a, b):
    d = a - b
    return (d * d).mean()


def loss_supervised(x_hat, label):
    """Fit between predicted and measured next-step velocities."""
    return mse(x_hat, label)


def loss_unsupervised(dx_dt, beta):
    """Mismatch between d(x_hat)/dT and the physics-layer acceleration."""
    return mse(dx_dt, beta)


def loss_total(l1, l2, weights):
    return weights.w1 * l1 + weights.w2 * l2


# -- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        """Update the active blocks of ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (blk, g) in enumerate(zip(params.blocks, grads)):
            if g is None or blk.frozen:
                continue
            for k, gk in g.items():
                m = self.m.setdefault((i, k), np.zeros_like(gk))
                v = self.v.setdefault((i, k), np.zeros_like(gk))
                m *= self.beta1
                m += (1.0 - self.beta1) * gk
                v *= self.beta2
                v += (1.0 - self.beta2) * gk * gk
                blk.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batches(n, batch_size, seed):
    """Endless stream of index batches, reshuffled every epoch."""
    rng = substream(seed, "batch")
    b = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - b + 1, b):
            yield perm[s:s + b]


def contiguous_batches(n, batch_size, seed):
    """Consecutive index runs in random order, so filter covariance can chain."""
    rng = substream(seed, "batch")
    b = min(batch_size, n)
    starts = np.arange(0, n - b + 1, b)
    while True:
        for s in rng.permutation(starts):
            yield np.arange(s, s + b)


# -- objectives ----------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    """Everything fixed across a training run besides the data."""
    coeff_bounds: object  # Bounds over COEFF_NAMES
    known: object  # KnownCoefficients
    ekf: _ekf.EkfSettings = field(default_factory=_ekf.EkfSettings)

    def bounds(self, config):
        return head_bounds(self.coeff_bounds, config, self.ekf.bounds if config.ekf else None)


def _batch_loss(weights, wins, config, problem, physics, lw):
    bounds = problem.bounds(config)
    if config.ekf:
        out = _ekf.ekf_forward(wins, weights, config, bounds, problem.known, problem.ekf,
                               time_grad=physics)
        l1 = _ekf.loss_ekf_supervised(out.x_ekf, out.measurement)
        if not physics:
            return l1
        return loss_total(l1, _ekf.loss_ekf_unsupervised(out.d_denoised_dt, out.beta), lw)
    p = forward(wins.history, wins.t_next, wins.t_now, weights, config, bounds,
                problem.known, time_grad=physics)
    l1 = loss_supervised(p.x_hat, wins.label)
    if not physics:
        return l1
    return loss_total(l1, loss_unsupervised(p.dx_dt, p.beta), lw)


def validation_loss(params, val, problem):
    """Supervised loss on ``val`` (filtered-state fit in EKF mode)."""
    config = params.config
    bounds = problem.bounds(config)
    if config.ekf:
        out = _ekf.ekf_forward(val, params.weights(), config, bounds, problem.known, problem.ekf)
        return float(_ekf.loss_ekf_supervised(out.x_ekf, out.measurement))
    p = _forward(val.history, val.t_next, val.t_now, params.weights(), config, bounds,
                 problem.known)
    return float(loss_supervised(p.x_hat, val.label))


def _norms(params):
    return {f"block{i}.{k}": float(np.linalg.norm(v))
            for i, b in enumerate(params.blocks) for k, v in b.arrays.items()}


def _run(phase, params, train, val, cfg, problem, physics):
    if len(train) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    opt = Adam(cfg.learning_rate)
    report = TrainReport(phase, cfg)
    best = math.inf
    sampler = contiguous_batches if params.config.ekf else batches
    stream = sampler(len(train), cfg.batch_size, cfg.seed)
    for it in range(1, cfg.iterations + 1):
        wins = train.take(next(stream))
        tracked = track(params)
        loss = _batch_loss(tracked, wins, params.config, problem, physics, cfg.weights)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise NonFiniteLoss(f"{phase}: non-finite loss at iteration {it}",
                                {"iteration": it, "loss": lv, "norms": _norms(params)})
        grads = backward(loss, tracked)
        opt.step(params, grads)
        report.train_loss.append(lv)
        if it % cfg.val_every == 0 or it == cfg.iterations:
            vl = validation_loss(params, val, problem)
            if not math.isfinite(vl):
                raise NonFiniteLoss(f"{phase}: non-finite validation loss at iteration {it}",
                                    {"iteration": it, "loss": vl, "norms": _norms(params)})
            report.val_iterations.append(it)
            report.val_loss.append(vl)
            if vl < best:
                best = vl
                report.best_iteration = it
                report.checkpoint = params.copy()
    report.final = params
    return report


def pretrain(train, val, problem, config=None, cfg=None, params=None):
    """Fit the network on the supervised loss alone.

    Starts from ``params`` when given (never modified), otherwise from a fresh
    initialisation of ``config`` seeded by ``cfg.seed``.
    """
    cfg = cfg or TrainRunConfig()
    if params is None:
        if config is None:
            raise ValueError("need a network config or initial parameters")
        params = init_params(config, cfg.seed)
    elif config is not None and params.config != config:
        raise ValueError("initial parameters do not match the network config")
    return _run("pretrain", params, train, val, cfg, problem, physics=False)


def finetune(checkpoint, train, val, problem, cfg=None, config=None):
    """Freeze the leading blocks and train the rest on the weighted loss."""
    cfg = cfg or TrainRunConfig()
    if config is not None and checkpoint.config != config:
        raise ValueError("checkpoint does not match the network config")
    n = default_freeze(len(checkpoint.blocks)) if cfg.freeze is None else cfg.freeze
    params = freeze_prefix(checkpoint, n)
    physics = cfg.weights.w2 > 0
    return _run("finetune", params, train, val, cfg, problem, physics)


def run_fthd(train, val, problem, config, total_iterations, batch_size=32, learning_rate=1e-3,
             seed=0, weights=None, freeze=None, val_every=100):
    """Pretrain then fine-tune, splitting the budget 2:1."""
    if total_iterations < 3:
        raise InvalidBudget("need at least 3 iterations to split across both phases")
    n_pre = (2 * total_iterations) // 3
    base = TrainRunConfig(n_pre, batch_size, learning_rate, seed, val_every=val_every)
    pre = pretrain(train, val, problem, config, base)
    ft_cfg = replace(base, iterations=total_iterations - n_pre, weights=weights or LossWeights(),
                     freeze=freeze)
    ft = finetune(pre.checkpoint, train, val, problem, ft_cfg)
    return pre, ft


def estimate_coefficients(params, windows, problem):
    """Mean guard output over ``windows`` as a single coefficient set."""
    config = params.config
    p = _forward(windows.history, windows.t_next, windows.t_now, params.weights(), config,
                 problem.bounds(config), problem.known)
    mean = np.asarray(p.head).mean(axis=0)
    return EstimatedCoefficients.from_vector(mean[:len(COEFF_NAMES)])


# -- hyperparameter search -----------------------------------------------------

# Search ranges covering the architectures and rates reported as optimal.
DEFAULT_SPACE = {
    "hidden_layers": ("int", 2, 8),
    "hidden_size": ("int", 16, 256),
    "gru_layers": ("int", 0, 4),
    "history": ("int", 1, 18),
    "batch_size": ("choice", [16, 32, 64, 128]),
    "learning_rate": ("loguniform", 5e-4, 1e-2),
}


def sample_config(space, rng):
    out = {}
    for name, spec in space.items():
        kind = spec[0]
        if kind == "int":
            out[name] = int(rng.integers(spec[1], spec[2] + 1))
        elif kind == "uniform":
            out[name] = float(rng.uniform(spec[1], spec[2]))
        elif kind == "loguniform":
            out[name] = float(np.exp(rng.uniform(np.log(spec[1]), np.log(spec[2]))))
        elif kind == "choice":
            out[name] = spec[1][int(rng.integers(len(spec[1])))]
        else:
            raise ValueError(f"unknown search dimension kind {kind!r}")
    return out


@dataclass
class SearchResult:
    best_index: int | None
    best_config: dict | None
    best_l_min: float | None
    trials: list  # dicts: index, config, l_min, error

    def to_dict(self):
        return asdict(self)


def random_search(space, trials, seed, pipeline):
    """Evaluate ``trials`` random configs; the first lowest ``l_min`` wins.

    ``pipeline(config_dict, index)`` returns a report with ``l_min`` (or a
    float).  Trials that raise are logged and skipped.
    """
    if trials < 1:
        raise InvalidBudget("need at least one trial")
    rng = substream(seed, "search")
    rows = []
    best = None
    for i in range(trials):
        conf = sample_config(space, rng)
        try:
            res = pipeline(conf, i)
            l_min = float(res if isinstance(res, (int, float)) else res.l_min)
            err = None
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("trial %d failed: %s", i, exc)
            l_min, err = None, f"{type(exc).__name__}: {exc}"
        rows.append({"index": i, "config": conf, "l_min": l_min, "error": err})
        if l_min is not None and math.isfinite(l_min) and (best is None or l_min < rows[best]["l_min"]):
            best = i
    if best is None:
        return SearchResult(None, None, None, rows)
    return SearchResult(best, rows[best]["config"], rows[best]["l_min"], rows)
