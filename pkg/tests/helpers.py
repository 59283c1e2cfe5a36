"""Shared oracles for gradient and time-derivative checks."""

import numpy as np

from fthd.net import (NetworkConfig, backward, forward, init_params, track)
from fthd.training import loss_supervised


def random_inputs(rng, batch, history, dt=0.02):
    """Plausible histories: moving forward, modest lateral motion."""
    h = np.empty((batch, history, 7))
    h[..., 0] = rng.uniform(0.5, 2.0, (batch, history))
    h[..., 1] = rng.uniform(-0.1, 0.1, (batch, history))
    h[..., 2] = rng.uniform(-1.5, 1.5, (batch, history))
    h[..., 3] = rng.uniform(0.0, 1.0, (batch, history))
    h[..., 4] = rng.uniform(-0.3, 0.3, (batch, history))
    h[..., 5:] = rng.uniform(-0.05, 0.05, (batch, history, 2))
    t_now = rng.uniform(0, 10, batch)
    t_next = t_now + dt * rng.uniform(0.8, 1.2, batch)
    label = h[:, -1, :3] + rng.normal(0, 0.05, (batch, 3))
    return h, t_next, t_now, label


def random_config(rng, max_layers=2, max_units=8, max_gru=1, max_history=4, ekf=False):
    return NetworkConfig(int(rng.integers(1, max_layers + 1)), int(rng.integers(1, max_units + 1)),
                         int(rng.integers(0, max_gru + 1)), int(rng.integers(1, max_history + 1)),
                         ekf)


def scale_params(params, factor):
    """Larger weights push the head away from the sigmoid midpoint."""
    for b in params.blocks:
        for v in b.arrays.values():
            v *= factor
    return params


def gradient_check(params, inputs, bounds, known, h=1e-5):
    """Per-block max relative error ||an - fd||_inf / ||fd||_inf of the supervised loss."""
    hist, t_next, t_now, label = inputs
    config = params.config
    tracked = track(params)
    loss = loss_supervised(forward(hist, t_next, t_now, tracked, config, bounds, known).x_hat,
                           label)
    grads = backward(loss, tracked)

    def f():
        return float(loss_supervised(forward(hist, t_next, t_now, params, config, bounds,
                                             known).x_hat, label))

    worst = 0.0
    for blk, g in zip(params.blocks, grads):
        if g is None:
            continue
        for k, arr in blk.arrays.items():
            fd = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + h
                fp = f()
                arr[i] = old - h
                fm = f()
                arr[i] = old
                fd[i] = (fp - fm) / (2 * h)
            scale = np.max(np.abs(fd))
            if scale == 0:
                err = np.max(np.abs(g[k]))
            else:
                err = np.max(np.abs(g[k] - fd)) / scale
            worst = max(worst, err)
    return worst


def time_fd(params, inputs, bounds, known, h=1e-6):
    hist, t_next, t_now, _ = inputs
    config = params.config
    up = forward(hist, t_next + h, t_now, params, config, bounds, known).x_hat
    dn = forward(hist, t_next - h, t_now, params, config, bounds, known).x_hat
    return (up - dn) / (2 * h)


def make_net(rng, seed, **kw):
    config = random_config(rng, **kw)
    return scale_params(init_params(config, seed), rng.uniform(0.5, 2.0))


def constant_head(config, values, bounds):
    """Network whose guard outputs equal ``values`` for every input."""
    params = init_params(config, 0)
    for b in params.blocks:
        for v in b.arrays.values():
            v[...] = 0.0
    frac = (np.asarray(values) - bounds.lower) / bounds.width
    params.blocks[-1].arrays["b"][...] = np.log(frac / (1 - frac))
    return params
