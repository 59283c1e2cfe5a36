"""Deterministic single-track data generator driven by pure pursuit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import VELOCITIES, Samples
from .dynamics import (V_EPS, ControlInput, EstimatedCoefficients, KnownCoefficients,
                       VehicleState, drivetrain_force, step)
from .seeding import substream


class SimDiverged(RuntimeError):
    pass


def oval(n=12, length=3.0, width=1.5):
    """Closed ellipse of ``n`` distinct waypoints (first point repeated at the end)."""
    s = np.linspace(0.0, 2.0 * np.pi, n + 1)
    pts = np.column_stack([0.5 * length * np.cos(s), 0.5 * width * np.sin(s)])
    pts[-1] = pts[0]
    return pts


@dataclass(frozen=True)
class TrackSpec:
    waypoints: np.ndarray = field(default_factory=oval)
    lookahead: float = 0.3
    speed: float = 1.5  # m/s, base target speed
    speed_amplitude: float = 0.8
    speed_period: float = 2.0  # s
    wheelbase: float = 0.062
    max_steer: float = 0.4  # rad
    max_d_steer: float = 0.04  # rad per step
    max_d_throttle: float = 0.1  # per step
    speed_gain: float = 0.2  # throttle delta per (m/s) of speed error
    # sinusoidal steering excitation so the data reach well into both tyre curves
    steer_dither: float = 0.15  # rad
    dither_period: float = 0.8  # s

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2 or len(w) < 3:
            raise ValueError("track needs at least 3 (x, y) waypoints")
        if np.linalg.norm(w[0] - w[-1]) > 1e-9:
            raise ValueError("track must be a closed loop (first == last waypoint)")
        object.__setattr__(self, "waypoints", w)

    def target_speed(self, t):
        return self.speed + self.speed_amplitude * np.sin(2.0 * np.pi * t / self.speed_period)


@dataclass(frozen=True)
class SimRun:
    ground_truth: EstimatedCoefficients
    known: KnownCoefficients
    rate_hz: float = 50.0
    count: int = 1000
    seed: int = 0
    bootstrap_steps: int = 25
    bootstrap_d_throttle: float = 0.04

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError("sample rate must be positive")
        if self.count < 2:
            raise ValueError("need at least two samples")

    @property
    def dt(self):
        return 1.0 / self.rate_hz


def _lookahead_point(track, x, y):
    pts = track.waypoints
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    rel = np.array([x, y]) - pts[:-1]
    u = np.clip(np.einsum("ij,ij->i", rel, seg) / seg_len**2, 0.0, 1.0)
    proj = pts[:-1] + u[:, None] * seg
    k = int(np.argmin(np.linalg.norm(proj - [x, y], axis=1)))
    # walk the lookahead distance forward along the closed polyline
    remaining = track.lookahead + u[k] * seg_len[k]
    n = len(seg)
    while remaining > seg_len[k]:
        remaining -= seg_len[k]
        k = (k + 1) % n
    return pts[k] + seg[k] * (remaining / seg_len[k])


def pure_pursuit_control(state, track, t=0.0):
    """Steering and throttle deltas toward the lookahead point and target speed."""
    gx, gy = _lookahead_point(track, state.x, state.y)
    dx, dy = gx - state.x, gy - state.y
    heading_err = np.arctan2(dy, dx) - state.theta
    heading_err = (heading_err + np.pi) % (2.0 * np.pi) - np.pi
    dist = max(np.hypot(dx, dy), 1e-9)
    steer_target = np.arctan2(2.0 * track.wheelbase * np.sin(heading_err), dist)
    steer_target += track.steer_dither * np.sin(2.0 * np.pi * t / track.dither_period)
    steer_target = np.clip(steer_target, -track.max_steer, track.max_steer)
    d_steer = np.clip(steer_target - state.steer, -track.max_d_steer, track.max_d_steer)
    d_throttle = track.speed_gain * (track.target_speed(t) - state.vx)
    d_throttle = np.clip(d_throttle, -track.max_d_throttle, track.max_d_throttle)
    # throttle must stay in [0, 1] after the delta is applied
    d_throttle = np.clip(d_throttle, -state.throttle, 1.0 - state.throttle)
    return ControlInput(float(d_throttle), float(d_steer))


def _pre_roll(run, track, start):
    """Straight-line launch from rest until vx exceeds V_EPS (not emitted)."""
    s = start
    for _ in range(10_000):
        if s.vx > V_EPS:
            return s
        f = drivetrain_force(s.vx, s.throttle, run.ground_truth)
        vx = max(0.0, s.vx + f / run.known.mass * run.dt)
        s = VehicleState(s.x + s.vx * np.cos(s.theta) * run.dt,
                         s.y + s.vx * np.sin(s.theta) * run.dt, s.theta, vx, 0.0, 0.0,
                         min(1.0, s.throttle + run.bootstrap_d_throttle), 0.0)
    raise SimDiverged("vehicle never left standstill; drivetrain too weak")


def generate_dataset(run, track):
    """Roll the model forward and return ``run.count`` consecutive samples.

    Rows are emitted from the first instant the car is moving faster than
    ``V_EPS``; the first ``bootstrap_steps`` emitted steps keep steering at
    zero and push the throttle up before pure pursuit takes over.
    """
    p0, p1 = track.waypoints[0], track.waypoints[1]
    start = VehicleState(p0[0], p0[1], float(np.arctan2(*(p1 - p0)[::-1])),
                         0.0, 0.0, 0.0, 0.0, 0.0)
    s = _pre_roll(run, track, start)
    rows = np.empty((run.count, 11))
    for i in range(run.count):
        t = i * run.dt
        if i < run.bootstrap_steps:
            d_t = min(run.bootstrap_d_throttle, 1.0 - s.throttle)
            u = ControlInput(d_t, 0.0)
        else:
            u = pure_pursuit_control(s, track, t)
        rows[i] = (t, s.vx, s.vy, s.omega, s.throttle, s.steer, u.d_throttle, u.d_steer,
                   s.x, s.y, s.theta)
        if not np.all(np.isfinite(rows[i])):
            raise SimDiverged(f"non-finite state at t={t:.3f}s")
        if s.vx <= V_EPS:
            raise SimDiverged(f"speed fell to {s.vx:.4f} m/s at t={t:.3f}s")
        if i + 1 < run.count:
            s = step(s, u, run.dt, run.known, run.ground_truth)
    names = ("time", "vx", "vy", "omega", "throttle", "steer", "d_throttle", "d_steer",
             "x", "y", "theta")
    return Samples(dict(zip(names, rows.T)))


def inject_noise(samples, sigma, seed):
    """Add zero-mean Gaussian noise to the velocity channels only."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    if np.any(sigma < 0):
        raise ValueError("noise standard deviations must be non-negative")
    rng = substream(seed, "noise")
    noise = rng.standard_normal((len(samples), 3)) * sigma
    return samples.with_columns(**{c: samples[c] + noise[:, j] for j, c in enumerate(VELOCITIES)})
