"""Sample tables, CSV I/O, N-step windowing and train/validation splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import V_EPS, ControlInput, VehicleState
from .seeding import substream

log = logging.getLogger(__name__)

COLUMNS = ("time", "vx", "vy", "omega", "throttle", "steer", "d_throttle", "d_steer")
POSE = ("x", "y", "theta")
FEATURES = ("vx", "vy", "omega", "throttle", "steer", "d_throttle", "d_steer")
VELOCITIES = ("vx", "vy", "omega")
GAP_FACTOR = 1.5


class SchemaError(ValueError):
    pass


class MonotonicityError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class Samples:
    """Column-oriented sample sequence.

    Row ``t`` holds the state at ``time[t]`` and the control deltas applied at
    that instant, so row ``t + 1`` is the Euler successor of row ``t``.
    """

    def __init__(self, columns, dropped=0):
        cols = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
        missing = [c for c in COLUMNS if c not in cols]
        if missing:
            raise SchemaError(f"missing columns: {missing}")
        n = len(cols["time"])
        if any(len(v) != n for v in cols.values()):
            raise SchemaError("columns differ in length")
        self.columns = cols
        self.dropped = dropped

    def __len__(self):
        return len(self.columns["time"])

    def __getitem__(self, name):
        return self.columns[name]

    def __eq__(self, other):
        return (isinstance(other, Samples) and self.names == other.names
                and all(np.array_equal(self[c], other[c]) for c in self.names))

    @property
    def names(self):
        return COLUMNS + (POSE if self.has_pose else ())

    @property
    def has_pose(self):
        return all(p in self.columns for p in POSE)

    @property
    def nominal_dt(self):
        return float(np.median(np.diff(self["time"])))

    def velocities(self):
        return np.column_stack([self[c] for c in VELOCITIES])

    def features(self):
        return np.column_stack([self[c] for c in FEATURES])

    def state(self, i):
        pose = [self[p][i] for p in POSE] if self.has_pose else [0.0, 0.0, 0.0]
        return VehicleState(*pose, *(self[c][i] for c in ("vx", "vy", "omega", "throttle", "steer")))

    def control(self, i):
        return ControlInput(self["d_throttle"][i], self["d_steer"][i])

    def steps(self):
        """Yield ``(time, VehicleState, ControlInput)`` per row."""
        for i in range(len(self)):
            yield self["time"][i], self.state(i), self.control(i)

    def with_columns(self, **updates):
        cols = {c: self[c].copy() for c in self.names}
        cols.update({k: np.asarray(v, dtype=float) for k, v in updates.items()})
        return Samples(cols)

    def take(self, idx):
        return Samples({c: self[c][idx] for c in self.names})


def save_csv(samples, path):
    names = samples.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        cols = [samples[c] for c in names]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def load_csv(path, v_eps=V_EPS):
    """Parse and validate a sample file; rows with ``vx <= v_eps`` are dropped."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(h.strip() for h in next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if header not in (COLUMNS, COLUMNS + POSE):
        missing = [c for c in COLUMNS if c not in header]
        raise SchemaError(f"{path}: header {list(header)} does not match schema"
                          + (f"; missing {missing}" if missing else ""))
    try:
        table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(table)):
        raise SchemaError(f"{path}: non-finite values")
    cols = dict(zip(header, table.T))
    if np.any(np.diff(cols["time"]) <= 0):
        raise MonotonicityError(f"{path}: time column is not strictly increasing")
    keep = cols["vx"] > v_eps
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        log.info("%s: dropped %d rows with vx <= %g m/s", path, dropped, v_eps)
        cols = {k: v[keep] for k, v in cols.items()}
    return Samples(cols, dropped=dropped)


@dataclass(frozen=True)
class WindowedSample:
    history: np.ndarray  # (N, 7) rows of FEATURES
    label: np.ndarray  # (3,) next-step velocities
    t_now: float
    t_next: float


class Windows:
    """Batch of N-step histories with next-step velocity labels."""

    def __init__(self, history, label, t_now, t_next, source):
        self.history = history
        self.label = label
        self.t_now = t_now
        self.t_next = t_next
        self.source = source  # row index of the last history row

    def __len__(self):
        return len(self.label)

    def __getitem__(self, i):
        return WindowedSample(self.history[i], self.label[i], float(self.t_now[i]),
                              float(self.t_next[i]))

    @property
    def n_history(self):
        return self.history.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        return Windows(self.history[idx], self.label[idx], self.t_now[idx],
                       self.t_next[idx], self.source[idx])

    def with_labels(self, label):
        return Windows(self.history, np.asarray(label, dtype=float), self.t_now,
                       self.t_next, self.source)


def window(samples, n):
    """Slide an ``n``-row history over ``samples``; label is the following row."""
    if n < 1:
        raise ValueError("history length must be >= 1")
    if len(samples) < n + 1:
        raise InsufficientData(f"need at least {n + 1} samples, got {len(samples)}")
    t = samples["time"]
    feats = samples.features()
    vel = samples.velocities()
    dt = samples.nominal_dt
    bad_gap = np.diff(t) > GAP_FACTOR * dt  # bad_gap[i]: gap between rows i and i+1
    # window ending at row i spans gaps i-n+1 .. i
    cum = np.concatenate([[0], np.cumsum(bad_gap)])
    last = np.arange(n - 1, len(samples) - 1)
    ok = (cum[last + 1] - cum[last - n + 1]) == 0
    last = last[ok]
    if len(last) == 0:
        raise InsufficientData("no contiguous window of the requested length")
    hist_idx = last[:, None] + np.arange(-n + 1, 1)[None, :]
    return Windows(feats[hist_idx], vel[last + 1], t[last], t[last + 1], last)


@dataclass(frozen=True)
class SplitSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("train ratio must lie in (0, 1]")


def split(windows, spec):
    """Random training subset; validation is always the full window set."""
    n = len(windows)
    k = math.ceil(round(spec.ratio * n, 9))
    idx = np.sort(substream(spec.seed, "split").choice(n, size=k, replace=False))
    return windows.take(idx), windows
