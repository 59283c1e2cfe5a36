"""Command-line pipelines: simulate, pretrain, finetune, denoise, evaluate, tune, sweep-forces.

Every command reads one JSON experiment config (a shipped preset or a file
that overrides one), writes its artifacts under ``--out`` and prints the
resolved config and seed first.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import ekf as ekf_mod
from .data import SplitSpec, load_csv, save_csv, split, window
from .dynamics import EstimatedCoefficients, KnownCoefficients, coefficient_bounds
from .evaluation import (coefficient_diff, compute_metrics, curve_rmse, force_sweep,
                         save_coefficient_diff, save_force_curve)
from .net import NetworkConfig, _forward, load_checkpoint, save_checkpoint
from .simulator import SimRun, TrackSpec, generate_dataset, inject_noise, oval
from .training import (DEFAULT_SPACE, LossWeights, Problem, TrainRunConfig, estimate_coefficients,
                       finetune, pretrain, random_search, run_fthd)

log = logging.getLogger("fthd")

PRESETS = ("sim", "noisy")


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, hint=""):
        super().__init__(f"missing artifact: {path}" + (f" ({hint})" if hint else ""))
        self.path = Path(path)


# -- config --------------------------------------------------------------------

def load_preset(name):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return json.loads(resources.files("fthd.presets").joinpath(f"{name}.json").read_text())


def preset_bounds(name):
    """Shipped bounds files: ``real`` and ``real_adjusted``."""
    text = resources.files("fthd.presets").joinpath(f"bounds_{name}.json").read_text()
    return coefficient_bounds(json.loads(text))


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("bounds", "space"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None):
    """Resolve a config: preset name, or a JSON file merged onto its ``base`` preset."""
    if path is None:
        return load_preset("sim")
    if str(path) in PRESETS:
        return load_preset(str(path))
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(p, "config file")
    doc = json.loads(p.read_text())
    cfg = _merge(load_preset(doc.pop("base", "sim")), doc)
    # relative data paths are taken relative to the config file
    for key in ("dataset", "bounds_file"):
        v = cfg.get("data", {}).get(key)
        if v and not Path(v).is_absolute():
            cfg["data"][key] = str((p.parent / v).resolve())
    return cfg


def _known(cfg):
    return KnownCoefficients(**cfg["known"])


def _bounds(cfg):
    f = cfg["data"].get("bounds_file")
    if f:
        if not Path(f).exists():
            raise MissingArtifact(f, "bounds file named in config")
        return ekf_mod.load_bounds_file(f)
    return coefficient_bounds(cfg["bounds"])


def _problem(cfg, bounds=None):
    settings = ekf_mod.EkfSettings(cfg["ekf"]["p0"], ekf_mod.cov_bounds(cfg["cov_bounds"]))
    return Problem(bounds or _bounds(cfg), _known(cfg), settings)


def _track(cfg):
    t = dict(cfg["simulation"]["track"])
    shape = t.pop("oval", {})
    return TrackSpec(waypoints=oval(**shape), **t)


def _run_config(cfg, phase, seed):
    d = dict(cfg[phase])
    d["seed"] = seed
    if "weights" in d:
        d["weights"] = LossWeights(**d["weights"])
    return TrainRunConfig(**d)


def _need(path, hint):
    if not Path(path).exists():
        raise MissingArtifact(path, hint)
    return Path(path)


def _dataset_path(cfg, out, noise):
    if cfg["data"].get("dataset"):
        return _need(cfg["data"]["dataset"], "dataset named in config")
    name = "dataset_noisy.csv" if noise else "dataset.csv"
    return _need(out / name, "run `simulate` first")


def _windows(cfg, out, noise):
    samples = load_csv(_dataset_path(cfg, out, noise), v_eps=cfg["data"]["v_eps"])
    wins = window(samples, cfg["network"]["history"])
    train, val = split(wins, SplitSpec(cfg["split"]["ratio"], cfg["seed"]))
    return samples, train, val


def _dump(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_simulate(cfg, out, args):
    sim = cfg["simulation"]
    gt = EstimatedCoefficients.from_dict(cfg["ground_truth"])
    run = SimRun(gt, _known(cfg), sim["rate_hz"], sim["count"], cfg["seed"],
                 sim["bootstrap_steps"], sim["bootstrap_d_throttle"])
    samples = generate_dataset(run, _track(cfg))
    save_csv(samples, out / "dataset.csv")
    _dump(gt.to_dict(), out / "ground_truth.json")
    written = ["dataset.csv", "ground_truth.json"]
    if args.noise:
        noisy = inject_noise(samples, cfg["noise"]["sigma"], cfg["seed"])
        save_csv(noisy, out / "dataset_noisy.csv")
        written.append("dataset_noisy.csv")
    return written


def _save_phase(out, name, report, problem, config):
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.json", report.checkpoint, problem.bounds(config), problem.known)
    report.save_json(d / "report.json")
    report.save_curves(d / "curves.csv")
    return [f"{name}/checkpoint.json", f"{name}/report.json", f"{name}/curves.csv"]


def cmd_pretrain(cfg, out, args):
    _, train, val = _windows(cfg, out, args.noise)
    config = NetworkConfig(**cfg["network"])
    problem = _problem(cfg)
    report = pretrain(train, val, problem, config, _run_config(cfg, "pretrain", cfg["seed"]))
    print(f"pretrain L_min = {report.l_min:.6e} at iteration {report.best_iteration}")
    return _save_phase(out, "pretrain", report, problem, config)


def cmd_finetune(cfg, out, args):
    ckpt = _need(out / "pretrain" / "checkpoint.json", "run `pretrain` first")
    params, _, _ = load_checkpoint(ckpt)
    config = NetworkConfig(**cfg["network"])
    _, train, val = _windows(cfg, out, args.noise)
    problem = _problem(cfg)
    report = finetune(params, train, val, problem, _run_config(cfg, "finetune", cfg["seed"]), config)
    print(f"finetune L_min = {report.l_min:.6e} at iteration {report.best_iteration}")
    return _save_phase(out, "finetune", report, problem, config)


def _best_checkpoint(out):
    for phase in ("finetune", "pretrain"):
        p = out / phase / "checkpoint.json"
        if p.exists():
            return p
    raise MissingArtifact(out / "finetune" / "checkpoint.json", "run `pretrain`/`finetune` first")


def cmd_denoise(cfg, out, args):
    ckpt = _need(out / "finetune" / "checkpoint.json", "run `finetune` with an EKF network first")
    params, _, _ = load_checkpoint(ckpt)
    if not params.config.ekf:
        raise ValueError("denoise needs a checkpoint trained with network.ekf = true")
    samples = load_csv(_dataset_path(cfg, out, args.noise), v_eps=cfg["data"]["v_eps"])
    problem = _problem(cfg)
    res = ekf_mod.denoise_dataset(samples, params, problem.coeff_bounds, problem.known, problem.ekf)
    ekf_mod.save_denoised(res, out / "denoised.csv", out / "denoised_noise.csv")
    wins = window(samples, params.config.history)
    est = estimate_coefficients(params, wins, problem)
    ra = cfg["range_adjust"]
    adj = ekf_mod.adjust_ranges(est, problem.coeff_bounds, ra["epsilon_frac"],
                                ra["expand_factor"], ra["max_rounds"])
    ekf_mod.save_adjustment(adj, out / "adjusted_bounds.json")
    return ["denoised.csv", "denoised_noise.csv", "adjusted_bounds.json"]


def _ground_truth(cfg, out):
    p = out / "ground_truth.json"
    if p.exists():
        return EstimatedCoefficients.from_dict(json.loads(p.read_text()))
    if cfg.get("ground_truth"):
        return EstimatedCoefficients.from_dict(cfg["ground_truth"])
    return None


def cmd_evaluate(cfg, out, args):
    ckpt = _best_checkpoint(out)
    params, _, _ = load_checkpoint(ckpt)
    samples = load_csv(_dataset_path(cfg, out, args.noise), v_eps=cfg["data"]["v_eps"])
    wins = window(samples, params.config.history)
    problem = _problem(cfg)
    config = params.config
    bounds = problem.bounds(config)
    if config.ekf:
        pred = ekf_mod.ekf_forward(wins, params.weights(), config, bounds, problem.known,
                                   problem.ekf).x_ekf
    else:
        pred = _forward(wins.history, wins.t_next, wins.t_now, params.weights(), config, bounds,
                        problem.known).x_hat
    report_path = ckpt.parent / "report.json"
    history = json.loads(report_path.read_text())["val_loss"] if report_path.exists() else None
    metrics = compute_metrics(pred, wins.label, history, cfg["split"]["ratio"],
                              {"checkpoint": str(ckpt.relative_to(out)), "seed": cfg["seed"]})
    metrics.save_json(out / "metrics.json")
    written = ["metrics.json"]
    est = estimate_coefficients(params, wins, problem)
    _dump(est.to_dict(), out / "estimated_coefficients.json")
    written.append("estimated_coefficients.json")
    gt = _ground_truth(cfg, out)
    if gt is not None:
        save_coefficient_diff(out / "coeff_diff.csv", coefficient_diff(est, gt, problem.coeff_bounds))
        written.append("coeff_diff.csv")
    written += _sweep(cfg, out, est, gt)
    return written


def _sweep(cfg, out, est, gt):
    sw = cfg["sweep"]
    curve = force_sweep(est, sw["alpha_min"], sw["alpha_max"], sw["points"])
    ref = force_sweep(gt, sw["alpha_min"], sw["alpha_max"], sw["points"]) if gt else None
    save_force_curve(out / "force_curve.csv", curve, ref)
    if ref is not None:
        _dump(curve_rmse(curve, ref), out / "force_curve_rmse.json")
        return ["force_curve.csv", "force_curve_rmse.json"]
    return ["force_curve.csv"]


def cmd_sweep_forces(cfg, out, args):
    ckpt = _best_checkpoint(out)
    params, _, _ = load_checkpoint(ckpt)
    samples = load_csv(_dataset_path(cfg, out, args.noise), v_eps=cfg["data"]["v_eps"])
    est = estimate_coefficients(params, window(samples, params.config.history), _problem(cfg))
    return _sweep(cfg, out, est, _ground_truth(cfg, out))


def cmd_tune(cfg, out, args):
    search = cfg["search"]
    trials = args.trials if args.trials is not None else search["trials"]
    samples = load_csv(_dataset_path(cfg, out, args.noise), v_eps=cfg["data"]["v_eps"])
    problem = _problem(cfg)
    space = {k: tuple(v) for k, v in (search.get("space") or DEFAULT_SPACE).items()}
    ratio, seed, ekf = cfg["split"]["ratio"], cfg["seed"], cfg["network"]["ekf"]

    def pipeline(conf, index):
        net = NetworkConfig(conf.get("hidden_layers", 2), conf.get("hidden_size", 16),
                            conf.get("gru_layers", 0), conf.get("history", 1), ekf)
        train, val = split(window(samples, net.history), SplitSpec(ratio, seed))
        pre, ft = run_fthd(train, val, problem, net, search["total_iterations"],
                           conf.get("batch_size", 32), conf.get("learning_rate", 1e-3),
                           seed + index)
        return ft

    result = random_search(space, trials, seed, pipeline)
    _dump(result.to_dict(), out / "tune" / "trials.json")
    _dump({"best_index": result.best_index, "best_config": result.best_config,
           "l_min": result.best_l_min}, out / "tune" / "best_config.json")
    print(f"best trial {result.best_index}: {result.best_config} (L_min {result.best_l_min})")
    return ["tune/trials.json", "tune/best_config.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "denoise": cmd_denoise,
    "evaluate": cmd_evaluate,
    "tune": cmd_tune,
    "sweep-forces": cmd_sweep_forces,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="fthd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="preset name (sim, noisy) or JSON file")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ratio", type=float, default=None, help="training-set ratio")
        p.add_argument("--noise", action="store_true",
                       help="simulate: also write a noisy copy; others: use it")
        p.add_argument("--trials", type=int, default=None)
    return ap


def resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ValueError("seed must be non-negative")
        cfg["seed"] = args.seed
    if args.ratio is not None:
        SplitSpec(args.ratio)
        cfg["split"]["ratio"] = args.ratio
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        print(f"command: {args.command}  seed: {cfg['seed']}")
        print("config: " + json.dumps(cfg, sort_keys=True))
        written = COMMANDS[args.command](cfg, out, args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for w in written:
        print(f"wrote {out / w}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
