# %% [markdown]
# # Recovering tyre and drivetrain coefficients from simulated data
#
# Simulate an RC car on an oval with known coefficients, pretrain the network
# on next-step velocities, fine-tune its last layers with the physics term
# added, and compare the estimated lateral force curves against the truth.
# Set `ITERATIONS = 15000` for the full run (about 20 s of CPU per 1000
# iterations with the default network is a safe upper bound).

# %%
from fthd.cli import _track, load_preset
from fthd.data import SplitSpec, split, window
from fthd.dynamics import EstimatedCoefficients, KnownCoefficients, coefficient_bounds
from fthd.ekf import EkfSettings, cov_bounds
from fthd.evaluation import coefficient_diff, curve_rmse, force_sweep
from fthd.net import NetworkConfig
from fthd.simulator import SimRun, generate_dataset
from fthd.training import Problem, estimate_coefficients, run_fthd

ITERATIONS = 3000

cfg = load_preset("sim")
gt = EstimatedCoefficients.from_dict(cfg["ground_truth"])
known = KnownCoefficients(**cfg["known"])
samples = generate_dataset(SimRun(gt, known), _track(cfg))
print(len(samples), "samples at", round(1 / samples.nominal_dt, 3), "Hz")

# %% [markdown]
# The steering dither keeps both axles well into the nonlinear part of the
# tyre curve, which is what makes B, C and D identifiable.

# %%
problem = Problem(coefficient_bounds(cfg["bounds"]), known,
                  EkfSettings(0.1, cov_bounds(cfg["cov_bounds"])))
net = NetworkConfig(3, 32, 0, 3)
train, val = split(window(samples, net.history), SplitSpec(0.3, 0))
pre, ft = run_fthd(train, val, problem, net, ITERATIONS)
print(f"pretrain L_min {pre.l_min:.3e}, fine-tune L_min {ft.l_min:.3e}")

# %%
est = estimate_coefficients(ft.checkpoint, val, problem)
rm = curve_rmse(force_sweep(est, -0.2, 0.2, 81), force_sweep(gt, -0.2, 0.2, 81))
print({k: round(v["relative"], 4) for k, v in rm.items()})
diff = coefficient_diff(est, gt, problem.coeff_bounds).as_dict()
for name in ("Bf", "Cf", "Df", "Br", "Cr", "Dr"):
    print(f"{name}: est {getattr(est, name):.4f} gt {getattr(gt, name):.4f} "
          f"normalized diff {diff[name]:.4f}")

# %%
curve, ref = force_sweep(est), force_sweep(gt)
for a, f, g in zip(curve.alpha[::20], curve.front[::20], ref.front[::20]):
    print(f"alpha {a:+.2f}  F_fy {f:+.4f}  truth {g:+.4f}")
