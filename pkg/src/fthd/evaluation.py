"""Velocity error metrics, lateral force sweeps and coefficient comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import COEFF_NAMES, pacejka_lateral

CHANNELS = ("vx", "vy", "omega")


class EmptyInput(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


@dataclass
class MetricsReport:
    rmse: dict
    eps_max: dict
    l_min: float | None = None
    ratio: float | None = None
    run: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def compute_metrics(predictions, labels, loss_history=None, ratio=None, run=None):
    """Per-channel RMSE and maximum absolute error; L_min from a loss history."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise EmptyInput("no samples to score")
    err = (p - y).reshape(len(p), -1)
    rmse = np.sqrt(np.mean(err**2, axis=0))
    emax = np.max(np.abs(err), axis=0)
    names = CHANNELS if err.shape[1] == 3 else tuple(f"c{i}" for i in range(err.shape[1]))
    hist = [] if loss_history is None else list(loss_history)
    return MetricsReport(dict(zip(names, rmse.tolist())), dict(zip(names, emax.tolist())),
                         min(hist) if hist else None, ratio, dict(run or {}))


@dataclass
class ForceCurve:
    alpha: np.ndarray
    front: np.ndarray
    rear: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.alpha) <= 0):
            raise ValueError("slip-angle grid must be strictly increasing")


def force_sweep(coeffs, alpha_min=-0.3, alpha_max=0.3, points=121):
    """Front and rear lateral force over a slip-angle grid.

    Each axle's horizontal shift is added to the grid before the magic
    formula, matching how the shifts enter the slip angles.
    """
    if points < 2:
        raise ValueError("grid needs at least 2 points")
    a = np.linspace(alpha_min, alpha_max, points)

    def axle(s):
        g = lambda n: float(getattr(coeffs, n + s))
        return pacejka_lateral(a + g("Sh"), g("B"), g("C"), g("D"), g("E"), g("Sv"))

    return ForceCurve(a, np.asarray(axle("f")), np.asarray(axle("r")))


def curve_rmse(curve, reference):
    """Per-axle RMSE between two sweeps on the same grid, and relative to max |reference|."""
    if not np.array_equal(curve.alpha, reference.alpha):
        raise ValueError("curves use different grids")
    out = {}
    for axle in ("front", "rear"):
        e = getattr(curve, axle) - getattr(reference, axle)
        r = float(np.sqrt(np.mean(e**2)))
        out[axle] = {"rmse": r, "relative": r / float(np.max(np.abs(getattr(reference, axle))))}
    return out


def save_force_curve(path, curve, reference=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["alpha", "f_fy", "f_ry"] + (["f_fy_gt", "f_ry_gt"] if reference is not None else [])
        w.writerow(head)
        for i, a in enumerate(curve.alpha):
            row = [a, curve.front[i], curve.rear[i]]
            if reference is not None:
                row += [reference.front[i], reference.rear[i]]
            w.writerow([repr(float(v)) for v in row])


@dataclass
class CoefficientDiff:
    names: tuple
    estimated: np.ndarray
    ground_truth: np.ndarray
    absolute: np.ndarray
    normalized: np.ndarray | None

    def as_dict(self, which="normalized"):
        return dict(zip(self.names, getattr(self, which).tolist()))


def _as_mapping(c):
    if hasattr(c, "to_dict"):
        return c.to_dict()
    return {k: float(v) for k, v in dict(c).items()}


def coefficient_diff(estimated, ground_truth, bounds=None):
    """|est - gt| per entry and, given bounds, the same divided by the bound width."""
    e, g = _as_mapping(estimated), _as_mapping(ground_truth)
    if set(e) != set(g):
        raise SchemaMismatch(f"coefficient sets differ: {sorted(set(e) ^ set(g))}")
    names = tuple(n for n in COEFF_NAMES if n in e) + tuple(sorted(set(e) - set(COEFF_NAMES)))
    ev = np.array([e[n] for n in names])
    gv = np.array([g[n] for n in names])
    absd = np.abs(ev - gv)
    norm = None
    if bounds is not None:
        if tuple(bounds.names) != names:
            raise SchemaMismatch("bounds do not cover the same coefficients")
        norm = absd / bounds.width
    return CoefficientDiff(names, ev, gv, absd, norm)


def save_coefficient_diff(path, diff):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "estimated", "ground_truth", "abs_diff", "normalized_diff"])
        for i, n in enumerate(diff.names):
            nd = "" if diff.normalized is None else repr(float(diff.normalized[i]))
            w.writerow([n, repr(float(diff.estimated[i])), repr(float(diff.ground_truth[i])),
                        repr(float(diff.absolute[i])), nd])
