"""Embedded extended Kalman filter for denoising velocity measurements.

The network head emits diagonal process (Q) and measurement (R) covariances
next to the vehicle coefficients.  Each measured next-step velocity is split
into the filtered physical part and a noise estimate.  The update runs on
numpy arrays, Tensors or Duals, so both the filter losses and their time
derivatives stay differentiable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .ad import Dual
from .data import GAP_FACTOR, VELOCITIES, Samples, save_csv, window
from .dynamics import COEFF_NAMES, Bounds, coefficient_bounds
from .net import _forward, head_bounds, load_checkpoint

log = logging.getLogger(__name__)

COV_NAMES = ("q_vx", "q_vy", "q_omega", "r_vx", "r_vy", "r_omega")
_EYE = np.eye(3)


class SingularInnovation(np.linalg.LinAlgError):
    pass


def cov_bounds(d):
    b = Bounds.from_dict(d, COV_NAMES)
    if np.any(b.lower <= 0):
        raise ValueError("covariance bounds must be strictly positive")
    return b


# Process/measurement covariance ranges used for the real-data experiments.
TABLE3_COV_BOUNDS = {
    "q_vx": [0.1, 1.0], "q_vy": [0.1, 1.0], "q_omega": [0.1, 1.0],
    "r_vx": [0.01, 1.0], "r_vy": [0.01, 1.0], "r_omega": [1e-4, 0.01],
}


@dataclass(frozen=True)
class EkfSettings:
    p0: float = 0.1
    bounds: Bounds = field(default_factory=lambda: cov_bounds(TABLE3_COV_BOUNDS))


def _diag(v):
    return v.reshape(*ad.value(v).shape, 1) * _EYE


def jacobian(omega, dt):
    """Batched velocity-update Jacobian, shape (B, 3, 3)."""
    a = dt * omega
    one = np.ones(np.shape(ad.value(a)))
    zero = np.zeros_like(one)
    return ad.stack([ad.stack([one, a, zero], -1),
                     ad.stack([-a, one, zero], -1),
                     ad.stack([zero, zero, one], -1)], -2)


def ekf_update(x_pred, measurement, omega, dt, P, q, r):
    """One batched filter update with identity measurement model.

    Shapes: ``x_pred``, ``measurement``, ``q``, ``r`` are (B, 3); ``omega``
    and ``dt`` are (B,); ``P`` is (B, 3, 3).  Returns
    ``(x_ekf, n_hat, P_next, K)``.
    """
    if np.any(np.asarray(ad.value(r)) <= 0):
        raise SingularInnovation("measurement covariance must be positive")
    F = jacobian(omega, dt)
    P_pred = F @ P @ ad.swap(F) + _diag(q)
    S = P_pred + _diag(r)
    sv = np.asarray(ad.value(S))
    if not np.all(np.isfinite(sv)) or np.any(np.linalg.det(sv) <= 0):
        raise SingularInnovation("innovation covariance is not invertible")
    K = P_pred @ ad.inv(S)
    residual = measurement - x_pred
    n_hat = (K @ residual.reshape(-1, 3, 1)).reshape(-1, 3)
    x_ekf = x_pred + n_hat
    P_next = (_EYE - K) @ P_pred
    return x_ekf, n_hat, P_next, K


def chains(t_now, t_next, nominal_dt):
    """Split window order into runs where each window continues the previous one."""
    runs, cur = [], [0]
    for i in range(1, len(t_now)):
        gap = t_now[i] - t_next[i - 1]
        step = t_next[i - 1] - t_now[i - 1]
        if abs(gap) <= 1e-9 and step <= GAP_FACTOR * nominal_dt:
            cur.append(i)
        else:
            runs.append(cur)
            cur = [i]
    runs.append(cur)
    return runs


@dataclass
class FilterOutput:
    x_pred: object  # (M, 3) model prediction
    x_ekf: object  # (M, 3) filtered state
    n_hat: object  # (M, 3) noise estimate
    measurement: np.ndarray  # (M, 3)
    beta: object  # (M, 3) physics-layer acceleration
    K: object  # (M, 3, 3)
    P: object  # (M, 3, 3) posterior covariance
    head: object
    d_denoised_dt: object = None  # d(measurement - n_hat)/d(t_next)


def _drop_tangent(x):
    return Dual(x.val) if isinstance(x, Dual) else x


def _take(x, idx):
    return x[idx]


def ekf_forward(windows, weights, config, bounds, phi_k, settings=None, time_grad=False,
                nominal_dt=None):
    """Network prediction followed by the filter update for every window.

    Windows are processed in the given order; the covariance carries over
    while a window starts where the previous one ended and resets to
    ``p0 * I`` otherwise.  ``bounds`` covers the full head (coefficients then
    covariances).  With ``time_grad`` the derivative of the denoised signal
    with respect to each window's ``t_next`` is returned; covariance carried
    from earlier windows is treated as constant in that derivative.
    """
    settings = settings or EkfSettings()
    t_next = np.asarray(windows.t_next, dtype=float)
    t_now = np.asarray(windows.t_now, dtype=float)
    tn = Dual(t_next, np.ones_like(t_next)) if time_grad else t_next
    pred = _forward(windows.history, tn, t_now, weights, config, bounds, phi_k)
    q, r = pred.cov[:, :3], pred.cov[:, 3:]
    omega_pred = pred.x_hat[:, 2]
    meas = np.asarray(windows.label, dtype=float)
    if nominal_dt is None:
        nominal_dt = float(np.median(t_next - t_now))
    runs = sorted(chains(t_now, t_next, nominal_dt), key=len, reverse=True)
    longest = len(runs[0])
    order, outs = [], []
    P = None
    for k in range(longest):
        active = [run[k] for run in runs if len(run) > k]
        idx = np.array(active)
        m = len(idx)
        if k == 0:
            P = np.broadcast_to(settings.p0 * _EYE, (m, 3, 3)).copy()
        else:
            P = _drop_tangent(P[:m]) if isinstance(P, Dual) else P[:m]
        res = ekf_update(_take(pred.x_hat, idx), meas[idx], _take(omega_pred, idx),
                         _take(pred.dt, idx), P, _take(q, idx), _take(r, idx))
        P = res[2]
        order.append(idx)
        outs.append(res)
    order = np.concatenate(order)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))

    def gather(j):
        parts = [o[j] for o in outs]
        joined = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return joined[inverse]

    x_ekf, n_hat, P_all, K_all = (gather(j) for j in range(4))
    d_dt = None
    if time_grad:
        denoised = meas - n_hat
        d_dt = denoised.tan if denoised.tan is not None else np.zeros_like(meas)
        x_ekf, n_hat, P_all, K_all = (_val(v) for v in (x_ekf, n_hat, P_all, K_all))
        return FilterOutput(_val(pred.x_hat), x_ekf, n_hat, meas, _val(pred.beta), K_all,
                            P_all, _val(pred.head), d_dt)
    return FilterOutput(pred.x_hat, x_ekf, n_hat, meas, pred.beta, K_all, P_all, pred.head)


def _val(x):
    return x.val if isinstance(x, Dual) else x


def _mse(a, b):
    d = a - b
    return (d * d).mean()


def loss_ekf_supervised(x_ekf, measurement):
    """MSE between the filtered state and the raw measurement."""
    return _mse(x_ekf, measurement)


def loss_ekf_unsupervised(d_denoised_dt, alpha_hat):
    """MSE between d(measurement - noise)/dT and the physics acceleration."""
    return _mse(d_denoised_dt, alpha_hat)


def denoised_time_derivative(measurement, n_hat):
    """Tangent of ``measurement - n_hat`` when ``n_hat`` is a Dual in t_next."""
    d = measurement - n_hat
    return d.tan if isinstance(d, Dual) and d.tan is not None else np.zeros(np.shape(measurement))


# -- dataset-level tools -------------------------------------------------------

@dataclass
class DenoiseResult:
    samples: Samples  # velocity channels replaced by the filtered state
    noise: np.ndarray  # (len, 3) noise estimate per row; zero where unfiltered
    filtered_rows: np.ndarray  # row indices that received a filtered value


def denoise_dataset(samples, params, coeff_bounds, phi_k, settings=None):
    """Replace velocities with the filter output; controls, time and pose untouched.

    The first ``history`` rows have no prediction and keep their measured
    values with a zero noise estimate.
    """
    settings = settings or EkfSettings()
    config = params.config
    if not config.ekf:
        raise ValueError("denoising needs an EKF-mode network")
    wins = window(samples, config.history)
    bounds = head_bounds(coeff_bounds, config, settings.bounds)
    out = ekf_forward(wins, params.weights(), config, bounds, phi_k, settings,
                      nominal_dt=samples.nominal_dt)
    rows = wins.source + 1
    vel = samples.velocities().copy()
    noise = np.zeros_like(vel)
    vel[rows] = out.x_ekf
    noise[rows] = out.n_hat
    filtered = samples.with_columns(**{c: vel[:, j] for j, c in enumerate(VELOCITIES)})
    return DenoiseResult(filtered, noise, rows)


def save_denoised(result, path, noise_path):
    save_csv(result.samples, path)
    t = result.samples["time"]
    with open(noise_path, "w", encoding="utf-8") as fh:
        fh.write("time,n_vx,n_vy,n_omega\n")
        for ti, (a, b, c) in zip(t, result.noise):
            fh.write(",".join(repr(float(v)) for v in (ti, a, b, c)) + "\n")


def denoise_checkpoint(samples, checkpoint_path, settings=None):
    params, bounds, known = load_checkpoint(checkpoint_path)
    if bounds is None or known is None:
        raise ValueError("checkpoint lacks bounds/known coefficients")
    coeff = Bounds(bounds.names[:len(COEFF_NAMES)], bounds.lower[:len(COEFF_NAMES)],
                   bounds.upper[:len(COEFF_NAMES)])
    cov = Bounds(bounds.names[len(COEFF_NAMES):], bounds.lower[len(COEFF_NAMES):],
                 bounds.upper[len(COEFF_NAMES):])
    settings = EkfSettings(p0=(settings or EkfSettings()).p0, bounds=cov)
    return denoise_dataset(samples, params, coeff, known, settings)


@dataclass
class RangeAdjustment:
    bounds: Bounds
    rounds: list  # per round: {"round", "hits": {name: "lower"|"upper"}, "bounds": dict}


def adjust_ranges(estimates, bounds, epsilon_frac=0.02, expand_factor=0.5, max_rounds=3):
    """Widen any bound that an estimate sits against.

    ``estimates`` is either a coefficient vector / mapping or a callable
    ``bounds -> estimates`` that retrains and re-estimates under the new
    bounds.  An entry within ``epsilon_frac * width`` of a bound moves that
    bound outward by ``expand_factor * width``.  Stops when no entry touches
    a bound or after ``max_rounds`` rounds.
    """
    if not 0.0 < epsilon_frac < 0.5:
        raise ValueError("epsilon_frac must lie in (0, 0.5)")
    if not expand_factor > 0:
        raise ValueError("expand_factor must be positive")
    log_rounds = []
    current = bounds
    for rnd in range(max_rounds):
        est = estimates(current) if callable(estimates) else estimates
        if isinstance(est, dict):
            est = [est[n] for n in current.names]
        est = np.asarray(getattr(est, "to_vector", lambda: est)(), dtype=float)
        width = current.width
        near_lo = est <= current.lower + epsilon_frac * width
        near_hi = est >= current.upper - epsilon_frac * width
        hits = {n: ("lower" if lo else "upper")
                for n, lo, hi in zip(current.names, near_lo, near_hi) if lo or hi}
        if not hits:
            log_rounds.append({"round": rnd, "hits": {}, "bounds": current.to_dict()})
            break
        lower = np.where(near_lo, current.lower - expand_factor * width, current.lower)
        upper = np.where(near_hi, current.upper + expand_factor * width, current.upper)
        current = Bounds(current.names, lower, upper)
        log.info("range adjustment round %d widened %s", rnd, sorted(hits))
        log_rounds.append({"round": rnd, "hits": hits, "bounds": current.to_dict()})
    return RangeAdjustment(current, log_rounds)


def save_adjustment(result, path):
    Path(path).write_text(json.dumps({"bounds": result.bounds.to_dict(),
                                      "rounds": result.rounds}, indent=2) + "\n")


def load_bounds_file(path):
    """Read a bounds JSON (plain mapping or an adjustment log) as coefficient bounds."""
    doc = json.loads(Path(path).read_text())
    return coefficient_bounds(doc.get("bounds", doc))


__all__ = [
    "COV_NAMES", "TABLE3_COV_BOUNDS", "EkfSettings", "SingularInnovation", "cov_bounds",
    "jacobian", "ekf_update", "ekf_forward", "loss_ekf_supervised", "loss_ekf_unsupervised",
    "denoised_time_derivative", "denoise_dataset", "denoise_checkpoint", "save_denoised",
    "adjust_ranges", "save_adjustment", "load_bounds_file", "FilterOutput", "DenoiseResult",
    "RangeAdjustment",
]
