"""Single-track (bicycle) vehicle model with Pacejka lateral tyre forces.

All functions are written with operator overloading and the dispatching math
in :mod:`fthd.ad`, so they accept python floats, numpy arrays (one entry per
sample), autodiff Tensors or Duals interchangeably.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .ad import arctan, cos, sin, value

V_EPS = 0.05  # m/s; slip angles divide by vx

COEFF_NAMES = (
    "Bf", "Cf", "Df", "Ef", "Shf", "Svf",
    "Br", "Cr", "Dr", "Er", "Shr", "Svr",
    "Cm1", "Cm2", "Cr0", "Cd", "Iz",
)


class DegenerateSpeed(ValueError):
    """Longitudinal speed at or below ``V_EPS``; slip angles are undefined."""


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    vx: float
    vy: float
    omega: float
    throttle: float
    steer: float

    def as_array(self):
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)


@dataclass(frozen=True)
class ControlInput:
    d_throttle: float
    d_steer: float


@dataclass(frozen=True)
class KnownCoefficients:
    mass: float
    lf: float
    lr: float

    def __post_init__(self):
        if not (self.mass > 0 and self.lf > 0 and self.lr > 0):
            raise ValueError("mass, lf and lr must be strictly positive")


@dataclass(frozen=True)
class EstimatedCoefficients:
    """Pacejka (front/rear), drivetrain and inertia coefficients.

    Fields may hold scalars or per-sample arrays/Tensors; ``from_vector``
    slices the last axis in ``COEFF_NAMES`` order.
    """

    Bf: float
    Cf: float
    Df: float
    Ef: float
    Shf: float
    Svf: float
    Br: float
    Cr: float
    Dr: float
    Er: float
    Shr: float
    Svr: float
    Cm1: float
    Cm2: float
    Cr0: float
    Cd: float
    Iz: float

    @classmethod
    def from_vector(cls, vec):
        return cls(*(vec[..., i] for i in range(len(COEFF_NAMES))))

    def to_vector(self):
        return np.array([value(getattr(self, n)) for n in COEFF_NAMES], dtype=float)

    def to_dict(self):
        return {n: float(value(getattr(self, n))) for n in COEFF_NAMES}

    @classmethod
    def from_dict(cls, d):
        missing = set(COEFF_NAMES) - set(d)
        if missing:
            raise KeyError(f"missing coefficients: {sorted(missing)}")
        return cls(**{n: float(d[n]) for n in COEFF_NAMES})

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class Acceleration:
    ax: float
    ay: float
    omega_dot: float


class Bounds:
    """Closed per-entry intervals ``[lower, upper]`` over a fixed name order."""

    def __init__(self, names, lower, upper):
        self.names = tuple(names)
        self.lower = np.asarray(lower, dtype=float).copy()
        self.upper = np.asarray(upper, dtype=float).copy()
        if self.lower.shape != (len(self.names),) or self.upper.shape != self.lower.shape:
            raise ValueError("bounds must have one lower/upper value per name")
        bad = [n for n, lo, hi in zip(self.names, self.lower, self.upper) if not lo < hi]
        if bad:
            raise ValueError(f"lower < upper violated for {bad}")

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return (isinstance(other, Bounds) and self.names == other.names
                and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __repr__(self):
        body = ", ".join(f"{n}=[{lo:g}, {hi:g}]" for n, lo, hi in
                         zip(self.names, self.lower, self.upper))
        return f"Bounds({body})"

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def midpoint(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, vec):
        vec = np.asarray(vec, dtype=float)
        return bool(np.all((vec >= self.lower) & (vec <= self.upper)))

    def concat(self, other):
        return Bounds(self.names + other.names, np.r_[self.lower, other.lower],
                      np.r_[self.upper, other.upper])

    def to_dict(self):
        return {n: [float(lo), float(hi)] for n, lo, hi in
                zip(self.names, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, d, names=None):
        names = tuple(d) if names is None else tuple(names)
        missing = set(names) - set(d)
        if missing:
            raise KeyError(f"bounds file lacks {sorted(missing)}")
        return cls(names, [d[n][0] for n in names], [d[n][1] for n in names])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, names=None):
        return cls.from_dict(json.loads(Path(path).read_text()), names)


def coefficient_bounds(d):
    """Build the estimated-coefficient bounds from a ``name -> [lo, hi]`` map."""
    return Bounds.from_dict(d, COEFF_NAMES)


def _check_speed(vx):
    if np.any(np.asarray(value(vx)) <= V_EPS):
        raise DegenerateSpeed(f"vx must exceed {V_EPS} m/s")


def drivetrain_force(vx, throttle, coeffs):
    """Rear-wheel longitudinal force in N."""
    vx2 = vx * vx
    return (coeffs.Cm1 - coeffs.Cm2 * vx2) * throttle - coeffs.Cr0 - coeffs.Cd * vx2


def slip_angles(state, phi_k, Shf, Shr):
    _check_speed(state.vx)
    alpha_f = state.steer - arctan((state.omega * phi_k.lf + state.vy) / state.vx) + Shf
    alpha_r = arctan((state.omega * phi_k.lr - state.vy) / state.vx) + Shr
    return alpha_f, alpha_r


def pacejka_lateral(alpha, B, C, D, E, Sv):
    """Magic-formula lateral force for slip angle ``alpha`` (rad)."""
    ba = B * alpha
    return Sv + D * sin(C * arctan(ba - E * (ba - arctan(ba))))


def lateral_forces(state, phi_k, coeffs):
    alpha_f, alpha_r = slip_angles(state, phi_k, coeffs.Shf, coeffs.Shr)
    f_fy = pacejka_lateral(alpha_f, coeffs.Bf, coeffs.Cf, coeffs.Df, coeffs.Ef, coeffs.Svf)
    f_ry = pacejka_lateral(alpha_r, coeffs.Br, coeffs.Cr, coeffs.Dr, coeffs.Er, coeffs.Svr)
    return f_fy, f_ry


def acceleration(state, phi_k, coeffs):
    """Body-frame accelerations (velocity rows of the Euler update divided by dt)."""
    f_rx = drivetrain_force(state.vx, state.throttle, coeffs)
    f_fy, f_ry = lateral_forces(state, phi_k, coeffs)
    m = phi_k.mass
    sin_d, cos_d = sin(state.steer), cos(state.steer)
    ax = (f_rx - f_fy * sin_d + m * state.vy * state.omega) / m
    ay = (f_ry + f_fy * cos_d - m * state.vx * state.omega) / m
    omega_dot = (f_fy * phi_k.lf * cos_d - f_ry * phi_k.lr) / coeffs.Iz
    return Acceleration(ax, ay, omega_dot)


def step(state, u, dt, phi_k, coeffs):
    """One explicit-Euler step of the eight-row state equation."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    acc = acceleration(state, phi_k, coeffs)
    s = state
    return VehicleState(
        x=s.x + (s.vx * cos(s.theta) - s.vy * sin(s.theta)) * dt,
        y=s.y + (s.vx * sin(s.theta) + s.vy * cos(s.theta)) * dt,
        theta=s.theta + s.omega * dt,
        vx=s.vx + acc.ax * dt,
        vy=s.vy + acc.ay * dt,
        omega=s.omega + acc.omega_dot * dt,
        throttle=s.throttle + u.d_throttle,
        steer=s.steer + u.d_steer,
    )


def state_jacobian(omega, dt):
    """Jacobian of the velocity update with respect to (vx, vy, omega)."""
    a = dt * omega
    return np.array([[1.0, a, 0.0], [-a, 1.0, 0.0], [0.0, 0.0, 1.0]])
