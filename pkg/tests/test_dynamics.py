import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fthd.dynamics import (COEFF_NAMES, V_EPS, Bounds, ControlInput, DegenerateSpeed,
                           EstimatedCoefficients, KnownCoefficients, VehicleState, acceleration,
                           drivetrain_force, lateral_forces, pacejka_lateral, slip_angles,
                           state_jacobian, step)



def coeffs(**kw):
    base = dict(zip(COEFF_NAMES, [10, 1.5, 1.0, -0.5, 0, 0, 10, 1.5, 1.0, -0.5, 0, 0,
                                  0.3, 0.05, 0.05, 0.01, 3e-5]))
    base.update(kw)
    return EstimatedCoefficients(**base)


def state(**kw):
    base = dict(x=0.0, y=0.0, theta=0.0, vx=1.0, vy=0.0, omega=0.0, throttle=0.0, steer=0.0)
    base.update(kw)
    return VehicleState(**base)


# drivetrain

def test_drivetrain_at_rest_is_rolling_resistance():
    assert drivetrain_force(0.0, 0.0, coeffs(Cr0=0.07)) == -0.07


def test_drivetrain_linear_throttle_only():
    c = coeffs(Cm1=1.0, Cm2=0.0, Cr0=0.0, Cd=0.0)
    assert drivetrain_force(3.0, 0.5, c) == 0.5


def test_drivetrain_worked_value():
    c = coeffs(Cm1=0.3, Cm2=0.05, Cr0=0.05, Cd=0.01)
    assert drivetrain_force(2.0, 0.8, c) == pytest.approx(-0.01, abs=1e-15)


# slip angles

def test_slip_straight_with_steer():
    af, ar = slip_angles(state(steer=0.1), KnownCoefficients(1, 1, 1), 0.0, 0.0)
    assert (af, ar) == (0.1, 0.0)


def test_slip_quarter_pi():
    af, ar = slip_angles(state(omega=1.0), KnownCoefficients(1, 1, 1), 0.0, 0.0)
    assert af == pytest.approx(-math.pi / 4, abs=1e-15)
    assert ar == pytest.approx(math.pi / 4, abs=1e-15)


def test_slip_worked_value():
    s = state(vx=2.0, vy=0.1, omega=0.5, steer=0.05)
    af, ar = slip_angles(s, KnownCoefficients(1.0, 0.5, 0.6), 0.0, 0.0)
    # 30-digit reference evaluation
    assert af == pytest.approx(-0.123245666452364947, abs=1e-15)
    assert ar == pytest.approx(0.0996686524911620274, abs=1e-15)


@pytest.mark.parametrize("vx", [V_EPS, 0.0, -1.0, 0.049])
def test_slip_rejects_slow(vx):
    with pytest.raises(DegenerateSpeed):
        slip_angles(state(vx=vx), KnownCoefficients(1, 1, 1), 0.0, 0.0)


@given(st.floats(V_EPS * (1 + 1e-9), 30.0))
def test_slip_accepts_above_threshold(vx):
    af, ar = slip_angles(state(vx=vx, vy=0.2, omega=0.3), KnownCoefficients(1, 0.5, 0.5), 0, 0)
    assert math.isfinite(af) and math.isfinite(ar)


def test_slip_continuous_in_vx():
    k = KnownCoefficients(1, 0.5, 0.5)
    jumps = []
    for n in (2001, 4001):
        vx = np.linspace(0.06, 5.0, n)
        af, ar = slip_angles(state(vx=vx, vy=0.2, omega=0.3), k, 0.0, 0.0)
        jumps.append([np.abs(np.diff(af)).max(), np.abs(np.diff(ar)).max()])
    # halving the grid spacing halves the largest jump: no discontinuity
    np.testing.assert_allclose(np.divide(*jumps[::-1]), 0.5, rtol=0.05)


# Pacejka

def test_pacejka_zero_slip():
    assert pacejka_lateral(0.0, 10, 1.5, 1.0, -0.5, 0.0) == 0.0


@given(st.floats(-1, 1), st.floats(1, 30), st.floats(0.1, 2), st.floats(0.1, 2))
def test_pacejka_e_zero(alpha, B, C, D):
    assert pacejka_lateral(alpha, B, C, D, 0.0, 0.0) == pytest.approx(
        D * math.sin(C * math.atan(B * alpha)), abs=1e-14)


def test_pacejka_worked_value():
    assert pacejka_lateral(0.05, 10, 1.5, 1.0, -0.5, 0.0) == pytest.approx(
        0.657219686185845389, abs=1e-15)


@given(st.floats(-1, 1), st.floats(1, 30), st.floats(0.1, 2), st.floats(0.1, 2),
       st.floats(-2, 1))
def test_pacejka_odd(alpha, B, C, D, E):
    assert pacejka_lateral(-alpha, B, C, D, E, 0.0) == pytest.approx(
        -pacejka_lateral(alpha, B, C, D, E, 0.0), abs=1e-14)


# acceleration

def test_acceleration_steady_straight():
    c = coeffs(Cm1=0.1, Cm2=0.0, Cr0=0.1, Cd=0.0)  # F_rx = 0 at full throttle
    acc = acceleration(state(vx=2.0, throttle=1.0), KnownCoefficients(0.04, 0.03, 0.03), c)
    assert (acc.ax, acc.ay, acc.omega_dot) == (0.0, 0.0, 0.0)


def test_acceleration_rotating_frame_terms():
    c = coeffs(Cm1=0, Cm2=0, Cr0=0, Cd=0, Df=0, Dr=0)
    acc = acceleration(state(vx=2.0, vy=1.0, omega=0.5), KnownCoefficients(0.04, 0.03, 0.03), c)
    assert acc.ax == pytest.approx(0.5, abs=1e-15)
    assert acc.ay == pytest.approx(-1.0, abs=1e-15)
    assert acc.omega_dot == 0.0


def _scalar_acc(s, k, c):
    # independent scalar composition with the math module
    frx = (c.Cm1 - c.Cm2 * s.vx**2) * s.throttle - c.Cr0 - c.Cd * s.vx**2
    af = s.steer - math.atan((s.omega * k.lf + s.vy) / s.vx) + c.Shf
    ar = math.atan((s.omega * k.lr - s.vy) / s.vx) + c.Shr

    def mf(a, B, C, D, E, Sv):
        return Sv + D * math.sin(C * math.atan(B * a - E * (B * a - math.atan(B * a))))

    ff = mf(af, c.Bf, c.Cf, c.Df, c.Ef, c.Svf)
    fr = mf(ar, c.Br, c.Cr, c.Dr, c.Er, c.Svr)
    ax = (frx - ff * math.sin(s.steer) + k.mass * s.vy * s.omega) / k.mass
    ay = (fr + ff * math.cos(s.steer) - k.mass * s.vx * s.omega) / k.mass
    wd = (ff * k.lf * math.cos(s.steer) - fr * k.lr) / c.Iz
    return ax, ay, wd


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_acceleration_matches_scalar_composition(seed):
    rng = np.random.default_rng(seed)
    s = state(vx=rng.uniform(0.1, 3), vy=rng.uniform(-0.5, 0.5), omega=rng.uniform(-3, 3),
              throttle=rng.uniform(0, 1), steer=rng.uniform(-0.4, 0.4))
    k = KnownCoefficients(*rng.uniform(0.02, 0.06, 3))
    c = EstimatedCoefficients(*rng.uniform(0.01, 2.0, len(COEFF_NAMES)))
    acc = acceleration(s, k, c)
    ref = _scalar_acc(s, k, c)
    np.testing.assert_allclose([acc.ax, acc.ay, acc.omega_dot], ref, rtol=1e-12, atol=1e-12)


def test_acceleration_vectorised(gt, known):
    rng = np.random.default_rng(3)
    n = 50
    s = state(vx=rng.uniform(0.5, 2, n), vy=rng.uniform(-0.1, 0.1, n),
              omega=rng.uniform(-1, 1, n), throttle=rng.uniform(0, 1, n),
              steer=rng.uniform(-0.3, 0.3, n))
    acc = acceleration(s, known, gt)
    for i in range(n):
        si = state(vx=s.vx[i], vy=s.vy[i], omega=s.omega[i], throttle=s.throttle[i],
                   steer=s.steer[i])
        np.testing.assert_allclose([acc.ax[i], acc.ay[i], acc.omega_dot[i]],
                                   _scalar_acc(si, known, gt), rtol=1e-12)


# step

def test_step_zero_acceleration_advances_pose():
    c = coeffs(Cm1=0.1, Cm2=0.0, Cr0=0.1, Cd=0.0)
    s = state(vx=2.0, theta=0.3, throttle=1.0)
    n = step(s, ControlInput(0, 0), 0.02, KnownCoefficients(0.04, 0.03, 0.03), c)
    assert (n.vx, n.vy, n.omega) == (2.0, 0.0, 0.0)
    assert n.x == pytest.approx(2.0 * math.cos(0.3) * 0.02, abs=1e-16)
    assert n.y == pytest.approx(2.0 * math.sin(0.3) * 0.02, abs=1e-16)
    assert n.theta == 0.3


def test_step_zero_dt_applies_deltas_only(gt, known):
    s = state(vx=1.2, vy=0.1, omega=0.4, throttle=0.3, steer=0.1, x=1, y=2, theta=0.5)
    n = step(s, ControlInput(0.05, -0.02), 0.0, known, gt)
    assert n.as_array()[:6].tolist() == s.as_array()[:6].tolist()
    assert n.throttle == 0.3 + 0.05 and n.steer == 0.1 - 0.02


def test_step_negative_dt(gt, known):
    with pytest.raises(ValueError):
        step(state(), ControlInput(0, 0), -0.01, known, gt)


def test_step_slow_raises(gt, known):
    with pytest.raises(DegenerateSpeed):
        step(state(vx=0.01), ControlInput(0, 0), 0.02, known, gt)


@given(st.integers(0, 2**32 - 1))
def test_step_velocity_rows_are_euler(seed):
    rng = np.random.default_rng(seed)
    s = state(vx=rng.uniform(0.1, 3), vy=rng.uniform(-0.5, 0.5), omega=rng.uniform(-3, 3),
              throttle=rng.uniform(0, 1), steer=rng.uniform(-0.4, 0.4))
    k = KnownCoefficients(*rng.uniform(0.02, 0.06, 3))
    c = EstimatedCoefficients(*rng.uniform(0.01, 2.0, len(COEFF_NAMES)))
    dt = rng.uniform(0.001, 0.05)
    acc = acceleration(s, k, c)
    n = step(s, ControlInput(0.01, 0.01), dt, k, c)
    assert n.vx == s.vx + acc.ax * dt
    assert n.vy == s.vy + acc.ay * dt
    assert n.omega == s.omega + acc.omega_dot * dt


@given(st.floats(0.1, 5), st.floats(-2, 2), st.floats(-5, 5), st.floats(0.001, 0.05))
def test_step_force_free_speed_conserved_to_second_order(vx, vy, omega, dt):
    c = coeffs(Cm1=0, Cm2=0, Cr0=0, Cd=0, Df=0, Dr=0)
    s = state(vx=vx, vy=vy, omega=omega)
    n = step(s, ControlInput(0, 0), dt, KnownCoefficients(0.04, 0.03, 0.03), c)
    v2 = vx**2 + vy**2
    # Coriolis terms are orthogonal to the velocity: the change is (omega*dt)^2 * v^2
    assert abs(n.vx**2 + n.vy**2 - v2) <= 1.0001 * omega**2 * v2 * dt**2 + 1e-12


def test_step_converges_linearly(gt, known):
    s = state(vx=1.2, vy=0.05, omega=0.8, throttle=0.4, steer=0.1)
    errs = []
    for dt in (1e-2, 1e-3, 1e-4):
        n = step(s, ControlInput(0, 0), dt, known, gt)
        errs.append(np.abs(n.as_array()[3:6] - s.as_array()[3:6]).max())
    assert errs[1] / errs[0] == pytest.approx(0.1, rel=1e-9)
    assert errs[2] / errs[1] == pytest.approx(0.1, rel=1e-9)


# Jacobian

def test_jacobian_identity_at_zero_rate():
    np.testing.assert_array_equal(state_jacobian(0.0, 0.02), np.eye(3))


def test_jacobian_worked_value():
    J = state_jacobian(2.0, 0.04)
    assert J[0, 1] == pytest.approx(0.08, abs=1e-16) and J[1, 0] == pytest.approx(-0.08, abs=1e-16)


@given(st.floats(-20, 20), st.floats(0.001, 0.1))
def test_jacobian_structure(omega, dt):
    A = state_jacobian(omega, dt) - np.eye(3)
    np.testing.assert_array_equal(A, -A.T)
    assert np.all(A[2] == 0) and np.all(A[:, 2] == 0)


# types and bounds

def test_known_must_be_positive():
    with pytest.raises(ValueError):
        KnownCoefficients(0.0, 0.1, 0.1)


def test_bounds_reject_inverted():
    with pytest.raises(ValueError):
        Bounds(("a", "b"), [0, 2], [1, 1])


def test_bounds_roundtrip(tmp_path, bounds):
    p = tmp_path / "b.json"
    bounds.save(p)
    assert Bounds.load(p, COEFF_NAMES) == bounds


def test_coefficients_dict_roundtrip(gt):
    assert EstimatedCoefficients.from_dict(gt.to_dict()) == gt
    with pytest.raises(KeyError):
        EstimatedCoefficients.from_dict({"Bf": 1.0})


def test_lateral_forces_consistent(gt, known):
    s = state(vx=1.5, vy=0.05, omega=0.5, steer=0.1)
    ff, fr = lateral_forces(s, known, gt)
    af, ar = slip_angles(s, known, gt.Shf, gt.Shr)
    assert ff == pacejka_lateral(af, gt.Bf, gt.Cf, gt.Df, gt.Ef, gt.Svf)
    assert fr == pacejka_lateral(ar, gt.Br, gt.Cr, gt.Dr, gt.Er, gt.Svr)
