# %% [markdown]
# # Filtering noisy velocities with a learned model
#
# Add Gaussian noise to a clean run, train the network in filter mode (its
# head also emits the process and measurement noise variances), replace the
# measured velocities with the filtered state and compare both against the
# clean signal. Then range-adjust the coefficient bounds around the estimate.

# %%
import numpy as np

from fthd.cli import _track, load_preset
from fthd.data import SplitSpec, split, window
from fthd.dynamics import EstimatedCoefficients, KnownCoefficients, coefficient_bounds
from fthd.ekf import EkfSettings, adjust_ranges, cov_bounds, denoise_dataset
from fthd.net import NetworkConfig
from fthd.simulator import SimRun, generate_dataset, inject_noise
from fthd.training import Problem, estimate_coefficients, run_fthd

cfg = load_preset("noisy")
gt = EstimatedCoefficients.from_dict(cfg["ground_truth"])
known = KnownCoefficients(**cfg["known"])
clean = generate_dataset(SimRun(gt, known), _track(cfg))
noisy = inject_noise(clean, cfg["noise"]["sigma"], 0)

problem = Problem(coefficient_bounds(cfg["bounds"]), known,
                  EkfSettings(cfg["ekf"]["p0"], cov_bounds(cfg["cov_bounds"])))
net = NetworkConfig(3, 32, 0, 3, ekf=True)
train, val = split(window(noisy, net.history), SplitSpec(0.3, 0))
pre, ft = run_fthd(train, val, problem, net, 2000)

# %%
res = denoise_dataset(noisy, ft.checkpoint, problem.coeff_bounds, known, problem.ekf)
rows = res.filtered_rows
ref = clean.velocities()[rows]
for name, v in (("noisy", noisy.velocities()[rows]), ("filtered", res.samples.velocities()[rows])):
    print(name, np.sqrt(np.mean((v - ref) ** 2, axis=0)))

# %% [markdown]
# With the default covariance ranges the measurement variance sits far below
# the process variance, so the gain is close to identity and the filtered
# state moves only slightly toward the model prediction.

# %%
est = estimate_coefficients(ft.checkpoint, window(noisy, net.history), problem)
adj = adjust_ranges(est, problem.coeff_bounds)
print("adjustment rounds:", len(adj.rounds), [r["hits"] for r in adj.rounds])
for n, lo, hi in zip(adj.bounds.names, adj.bounds.lower, adj.bounds.upper):
    print(f"{n:4s} [{lo:.4g}, {hi:.4g}]")
