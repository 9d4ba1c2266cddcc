"""Experiment harness: run / sweep / probe subcommands.

Configs are flat key=value text files; any key can be overridden on the
command line as ``--key value``. Runs write a per-iteration trace CSV and a
JSON summary that echoes every resolved parameter, so artifacts are
self-describing. Floats are serialized with 17 significant digits, which
makes bit-reproducibility checkable from the files themselves.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .activations import ActivationError, make_activation
from .datasets import make_noise, plant_instance
from .diagnostics import (
    check_landscape,
    check_tail_facts,
    probe_noise_free_sharpness,
    probe_noisy_sharpness,
)
from .distributions import ConfigError, DomainError, estimate_margin, make_distribution, rng_for
from .learner import LearnerConfig, NumericAbort, derive_params, train
from .surrogate import finite_difference_grad, surrogate_grad, surrogate_loss

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

TRACE_HEADER = "seed,iter,dist_to_wstar_sq,grad_norm,l2_holdout,wallclock_ms"
SWEEP_HEADER = "axis_value,seed,final_l2,opt_certificate,ratio"
SWEEP_AGG_HEADER = "axis_value,median,q25,q75"

_DEFAULTS = {
    "distribution": "gaussian",
    "d": "10",
    "activation": "relu",
    "noise": "none",
    "W": "2.0",
    "eps": "1e-2",
    "delta": "0.1",
    "mu": "0.1",
    "seeds": "1",
    "out": "runs",
    "project": "none",
    "mode": "auto",
    "wstar_norm": "1.0",
    "instance_seed": "777",
    "holdout_n": "4096",
    "c_N": "1.0",
    "c_H": "1.0",
    "n_policy": "floor",
    "margin_gamma": "0.5",
    "margin_n": "100000",
    "stop_grad_threshold": "0",
    # optional overrides: T, N, eta, M, r_eps
}


def fmt(x) -> str:
    """17-significant-digit float serialization (round-trip exact)."""
    return format(float(x), ".17g")


def parse_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    cfg = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, val = line.split("=", 1)
        cfg[key.strip()] = val.strip()
    return cfg


def resolve_config(args, overrides: list[str]) -> dict:
    cfg = dict(_DEFAULTS)
    if args.config:
        cfg.update(parse_config_file(args.config))
    if args.out:
        cfg["out"] = args.out
    if args.seeds:
        cfg["seeds"] = args.seeds
    it = iter(overrides)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key value override, got {tok!r}")
        key = tok[2:]
        try:
            val = next(it)
        except StopIteration:
            raise ConfigError(f"override {tok!r} is missing its value") from None
        cfg[key] = val
    return cfg


def _seeds(cfg: dict) -> list[int]:
    return [int(s) for s in str(cfg["seeds"]).split(",") if s.strip() != ""]


def _build_problem(cfg: dict):
    """(spec, act, noise, instance, mode) from a resolved config dict."""
    d = int(cfg["d"])
    spec = make_distribution(cfg["distribution"], d, seed=int(cfg["instance_seed"]))
    act = make_activation(cfg["activation"])
    noise = make_noise(cfg["noise"], seed=int(cfg["instance_seed"]) + 1)
    rng = rng_for(int(cfg["instance_seed"]), 50)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    wstar = float(cfg["wstar_norm"]) * direction
    instance = plant_instance(wstar, float(cfg["W"]), act, noise, spec=spec)
    mode = cfg["mode"]
    if mode == "auto":
        mode = "monotone" if act.monotone else "nonmonotone"
    return spec, act, noise, instance, mode


def _resolve_mu(cfg: dict, spec, act, instance) -> float:
    if str(cfg["mu"]).strip().lower() != "auto":
        return float(cfg["mu"])
    gamma = float(cfg["margin_gamma"])
    cert = estimate_margin(spec, instance.wstar, gamma, int(cfg["margin_n"]))
    mu = 0.1 * cert.lam ** 2 * gamma * act.beta * spec.tail_rho / spec.tail_B
    if not mu > 0.0:
        raise ConfigError("auto mu came out non-positive (degenerate margin certificate)")
    return min(mu, 0.999)


def _learner_config(cfg: dict, spec, act, instance) -> LearnerConfig:
    mu = _resolve_mu(cfg, spec, act, instance)
    overridden = [k for k in ("T", "N", "eta", "M", "r_eps") if k in cfg]
    config = derive_params(spec, act, float(cfg["W"]), float(cfg["eps"]),
                           float(cfg["delta"]), mu, c_N=float(cfg["c_N"]),
                           c_H=float(cfg["c_H"]), n_policy=cfg["n_policy"],
                           project=cfg["project"])
    if overridden:
        config.derive = False
        if "T" in cfg:
            config.T = int(float(cfg["T"]))
        if "N" in cfg:
            config.N = int(float(cfg["N"]))
        if "eta" in cfg:
            config.eta = float(cfg["eta"])
        if "M" in cfg:
            config.M = float(cfg["M"])
        if "r_eps" in cfg:
            config.r_eps = float(cfg["r_eps"])
    config.stop_grad_threshold = float(cfg["stop_grad_threshold"])
    return config


def _worker_count(n_jobs: int) -> int:
    cap = int(os.environ.get("SHARP_NEURON_THREADS", "1"))
    return max(1, min(cap, n_jobs))


def _one_run(payload):
    cfg, seed = payload
    spec, act, noise, instance, mode = _build_problem(cfg)
    config = _learner_config(cfg, spec, act, instance)
    w, trace = train(config, spec, instance, mode=mode, seed=seed,
                     holdout_n=int(cfg["holdout_n"]))
    return seed, w, trace, config, instance


def _run_all(cfg: dict):
    seeds = _seeds(cfg)
    jobs = [(cfg, s) for s in seeds]
    workers = _worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    return sorted(results, key=lambda r: r[0])


def _write_trace_csv(path: Path, results) -> None:
    with path.open("w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for seed, _w, trace, _config, _inst in results:
            dist = trace.dist_sq
            for t in range(trace.completed + 1):
                fh.write(",".join([
                    str(seed), str(t),
                    fmt(dist[t]) if dist is not None else "nan",
                    fmt(trace.grad_norm[t]),
                    fmt(trace.l2_holdout[t]),
                    fmt(trace.wallclock_ms[t]),
                ]) + "\n")


def cmd_run(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    results = _run_all(cfg)
    _write_trace_csv(out / "trace.csv", results)
    per_seed = {}
    for seed, w, trace, config, instance in results:
        per_seed[str(seed)] = {
            "final_l2_holdout": trace.l2_holdout[trace.completed],
            "final_dist_sq": (trace.dist_sq[trace.completed]
                              if trace.dist_sq is not None else None),
            "final_grad_norm": trace.grad_norm[trace.completed],
            "iterations_completed": trace.completed,
            "stopped_early": trace.stopped_early,
            "wallclock_ms": trace.wallclock_ms[trace.completed],
            "w_final": [float(v) for v in w],
        }
    config = results[0][3]
    instance = results[0][4]
    summary = {
        "config": {k: str(v) for k, v in cfg.items()},
        "resolved": config.resolved(),
        "opt_certificate": instance.opt_upper_bound,
        "wstar": [float(v) for v in instance.wstar],
        "seeds": per_seed,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"run: {len(results)} seed(s) -> {out/'trace.csv'}")
    return EXIT_OK


_AXES = ("noise_level", "dim", "batch_size", "eps")


def _apply_axis(cfg: dict, axis: str, value: str) -> dict:
    sub = dict(cfg)
    if axis == "noise_level":
        sub["noise"] = f"add:{value}"
    elif axis == "dim":
        sub["d"] = value
    elif axis == "batch_size":
        sub["N"] = value
    elif axis == "eps":
        sub["eps"] = value
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {_AXES}")
    return sub


def cmd_sweep(cfg: dict, axis: str, values: list[str]) -> int:
    if axis not in _AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one --values entry")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        results = _run_all(_apply_axis(cfg, axis, value))
        for seed, _w, trace, _config, instance in results:
            final = trace.l2_holdout[trace.completed]
            cert = instance.opt_upper_bound
            ratio = final / cert if cert > 0 else math.nan
            rows.append((float(value), seed, final, cert, ratio))
    with (out / "sweep.csv").open("w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for value, seed, final, cert, ratio in rows:
            fh.write(f"{fmt(value)},{seed},{fmt(final)},{fmt(cert)},{fmt(ratio)}\n")
    with (out / "sweep_agg.csv").open("w") as fh:
        fh.write(SWEEP_AGG_HEADER + "\n")
        for value in sorted({r[0] for r in rows}):
            finals = np.array([r[2] for r in rows if r[0] == value])
            fh.write(",".join([
                fmt(value), fmt(np.median(finals)),
                fmt(np.quantile(finals, 0.25)), fmt(np.quantile(finals, 0.75)),
            ]) + "\n")
    print(f"sweep {axis}: {len(values)} value(s) -> {out/'sweep.csv'}")
    return EXIT_OK


def _gradcheck(cfg: dict) -> tuple[bool, str]:
    act = make_activation(cfg["activation"])
    rng = rng_for(int(cfg["instance_seed"]), 60)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 7))
        n = int(rng.integers(4, 33))
        xs = rng.standard_normal((n, d))
        ys = rng.standard_normal(n)
        w = rng.standard_normal(d)
        g = surrogate_grad(act, w, xs, ys)
        g_fd = finite_difference_grad(lambda v: surrogate_loss(act, v, xs, ys), w)
        rel = np.linalg.norm(g_fd - g) / (1.0 + np.linalg.norm(g))
        worst = max(worst, float(rel))
    return worst < 1e-4, f"max relative FD error {worst:.3e} (tolerance 1e-4)"


def cmd_probe(cfg: dict, which: str, report_only: bool = False) -> int:
    spec, act, noise, instance, mode = _build_problem(cfg)
    grad_act = act
    if which == "sharpness":
        rep = probe_noise_free_sharpness(spec, grad_act, instance.wstar,
                                         seed=int(cfg["instance_seed"]))
        passed, detail = rep.passed, (
            f"mu_bar_hat={rep.mu_bar_hat:.5f} max_se={rep.max_se:.2e} probes={rep.probes}")
    elif which == "noisy_sharpness":
        rep = probe_noisy_sharpness(spec, grad_act, instance,
                                    seed=int(cfg["instance_seed"]))
        passed, detail = rep.passed, (
            f"min_ratio={rep.mu_bar_hat:.5f} excluded_radius={rep.excluded_ball_radius:.4f}"
            f" degenerate={rep.degenerate}")
    elif which == "landscape":
        rep = check_landscape(spec, act, instance, float(cfg["eps"]),
                              mu=_resolve_mu(cfg, spec, act, instance),
                              seed=int(cfg["instance_seed"]))
        passed, detail = rep.passed, (
            f"ratio={rep.ratio:.4f} budget={rep.budget:.4f} l2={rep.l2_final:.5f}")
    elif which == "tails":
        rep = check_tail_facts(spec, seed=int(cfg["instance_seed"]))
        passed = rep.passed
        detail = (f"family={rep.family} H2(0)={rep.h2_zero:.4f} "
                  f"H4(0)={rep.h4_zero:.4f} bound={rep.moment_bound:.2f}")
    elif which == "gradcheck":
        passed, detail = _gradcheck(cfg)
    else:
        raise ConfigError(f"unknown probe {which!r}")
    print(f"probe {which}: {'PASS' if passed else 'FAIL'} ({detail})")
    return EXIT_OK if (passed or report_only) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sharp-neuron",
        description="Surrogate-loss SGD experiments for single-neuron regression")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "probe"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seeds", default=None, help="comma-separated seed list")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=_AXES)
            p.add_argument("--values", required=True,
                           help="comma-separated axis values")
        if name == "probe":
            p.add_argument("--which", required=True,
                           choices=("sharpness", "noisy_sharpness", "landscape",
                                    "tails", "gradcheck"))
            p.add_argument("--report-only", action="store_true",
                           help="always exit 0, just print the report")
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, [v for v in args.values.split(",") if v])
        return cmd_probe(cfg, args.which, report_only=args.report_only)
    except (ConfigError, ActivationError, DomainError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
