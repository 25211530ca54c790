"""Batch front end: config-driven runs emitting CSV artifacts plus a JSON manifest.

Subcommands: theory, phase, gamp, mcmc, spectrum.  A run reads a YAML config
(documented key-value schema below), writes one CSV with a schema-version
header line and a manifest echoing the config; identical config and seed give
byte-identical CSV output.

Config schema (keys by mode; unknown keys are rejected):
  mode: theory | phase | gamp | mcmc | spectrum
  gamma: float            alpha: float | [floats] | {start, stop, num}
  delta: float            activation: name | {coeffs: [mu0, mu1, ...]}
  prior: gaussian | rademacher
  readout: {kind: ..., bins: int, atoms: [[value, prob], ...]}
  seed: int               out: path
  solver: {damping, tol, max_iter}            (theory / phase)
  phase: {bracket: [lo, hi], tol}             (phase)
  gamp: {d, n_instances, n_test}              (gamp)
  mcmc: {sampler: metropolis | hmc, d, sweeps | n_iter, init, snapshot_every}
  spectrum: {etas: [floats], resolution}      (spectrum)
  eta_max / n_eta: spectral table grid overrides
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .activations import activation_from_coeffs, get_activation
from .experiments import empirical_gen_error, generate_instance, hmc_gaussian, measure_overlaps, metropolis_binary
from .gamp import gamp_rie_fit, predict
from .potentials import ChannelSpec, PriorKind
from .readouts import make_readout
from .saddle import SaddleContext, SolverConfig, find_alpha_sp, solve_branches, universal_state_evolution
from .spectral import build_mmse_table, default_eta_grid, observation_esd, signal_esd

CSV_SCHEMA_VERSION = 1

THEORY_COLUMNS = ["alpha", "gamma", "branch", "f_rs", "q2", "q2_hat", "eps_opt", "mi"]
GAMP_COLUMNS = ["alpha", "test_mse", "se_q2", "iterations", "seed"]
MCMC_COLUMNS = ["iter", "energy", "acceptance", "q2"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str
    raw: dict
    seed: int
    out: str

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        mode = raw.get("mode")
        if mode not in ("theory", "phase", "gamp", "mcmc", "spectrum"):
            raise ConfigError(f"unknown mode {mode!r}")
        known = {
            "mode", "gamma", "alpha", "delta", "activation", "prior", "readout",
            "seed", "out", "solver", "phase", "gamp", "mcmc", "spectrum",
            "eta_max", "n_eta",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(mode=mode, raw=raw, seed=int(raw.get("seed", 0)), out=raw.get("out", "out"))


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def write_csv(path: str, columns: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_manifest(path: str, config: RunConfig, wall_time: float, outputs: list[str]) -> None:
    manifest = {
        "config": config.raw,
        "code_version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "wall_time_s": round(wall_time, 3),
        "outputs": outputs,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _activation(cfg: dict):
    spec = cfg.get("activation", "relu")
    if isinstance(spec, dict):
        return activation_from_coeffs(spec["coeffs"])
    return get_activation(spec)


def _readout(cfg: dict):
    r = cfg.get("readout", {"kind": "homogeneous"})
    if isinstance(r, str):
        r = {"kind": r}
    atoms = r.get("atoms")
    if atoms is not None:
        vals = np.array([a[0] for a in atoms])
        probs = np.array([a[1] for a in atoms])
        return make_readout("custom", atoms=vals, probs=probs, auto_rescale=r.get("auto_rescale", False))
    return make_readout(r.get("kind", "homogeneous"), n_bins=int(r.get("bins", 50)))


def _alphas(cfg: dict) -> np.ndarray:
    a = cfg.get("alpha", 1.0)
    if isinstance(a, dict):
        alphas = np.linspace(float(a["start"]), float(a["stop"]), int(a["num"]))
    elif isinstance(a, (list, tuple)):
        alphas = np.asarray(a, dtype=float)
    else:
        alphas = np.asarray([float(a)])
    if alphas.size > 1 and not np.all(np.diff(alphas) > 0):
        raise ConfigError("alpha grid must be strictly increasing")
    return alphas


def _context(cfg: dict, cache_dir: Optional[str]) -> SaddleContext:
    gamma = float(cfg.get("gamma", 0.5))
    readout = _readout(cfg)
    eta_grid = None
    if "eta_max" in cfg or "n_eta" in cfg:
        n_low = int(cfg.get("n_eta", 90))
        eta_grid = default_eta_grid(
            eta_max=float(cfg.get("eta_max", 500.0)),
            n_low=n_low,
            n_high=max(6, n_low // 4),
        )
    table = build_mmse_table(readout, gamma, eta_grid=eta_grid, cache_dir=cache_dir)
    return SaddleContext(
        alpha=1.0,
        gamma=gamma,
        activation=_activation(cfg),
        readout=readout,
        prior=PriorKind(cfg.get("prior", "gaussian")),
        channel=ChannelSpec(tag="gaussian_linear", delta=float(cfg.get("delta", 0.1))),
        table=table,
    )


def _solver_cfg(cfg: dict) -> SolverConfig:
    s = cfg.get("solver", {})
    return SolverConfig(
        damping=float(s.get("damping", 0.5)),
        tol=float(s.get("tol", 1e-8)),
        max_iter=int(s.get("max_iter", 5000)),
    )


def _theory_row(ctx: SaddleContext, alpha: float, scfg: SolverConfig, atoms: np.ndarray):
    branches = solve_branches(ctx.with_alpha(alpha), scfg)
    rows = []
    for name in ("universal", "specialisation"):
        sol = branches[name]
        if sol is None:
            continue
        tag = name
        if sol is not branches["selected"]:
            tag += "_metastable"
        row = [alpha, ctx.gamma, tag, sol.f_rs, sol.state.q2, sol.state.q2_hat, sol.eps_opt, sol.mutual_info]
        row += [sol.state.qw[i] for i in range(atoms.size)]
        row += [sol.state.qw_hat[i] for i in range(atoms.size)]
        rows.append(row)
    return rows


def _theory_worker(args):
    ctx, alpha, scfg, atoms = args
    return _theory_row(ctx, alpha, scfg, atoms)


def run(config: RunConfig, jobs: int = 1, spectral_cache: Optional[str] = None) -> int:
    """Execute one run; returns the process exit status (0 ok, 2 convergence flags)."""
    t0 = time.time()
    cfg = config.raw
    outputs = []
    status = 0

    if config.mode == "spectrum":
        gamma = float(cfg.get("gamma", 0.5))
        readout = _readout(cfg)
        spec = cfg.get("spectrum", {})
        etas = [float(e) for e in spec.get("etas", [0.0, 1.0])]
        res = int(spec.get("resolution", 2000))
        sig = signal_esd(readout, gamma, resolution=res)
        rows = []
        for eta in etas:
            mu = observation_esd(sig, eta, resolution=res)
            for x, dens in zip(mu.grid, mu.density):
                rows.append([eta, x, dens])
        path = config.out + ".csv"
        write_csv(path, ["eta", "x", "density"], rows)
        outputs.append(path)

    elif config.mode == "theory":
        ctx = _context(cfg, spectral_cache)
        scfg = _solver_cfg(cfg)
        alphas = _alphas(cfg)
        atoms = ctx.readout.values
        columns = THEORY_COLUMNS + [f"qw_{i}" for i in range(atoms.size)] + [
            f"qw_hat_{i}" for i in range(atoms.size)
        ]
        tasks = [(ctx, float(a), scfg, atoms) for a in alphas]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_theory_worker, tasks))
        else:
            results = [_theory_worker(t) for t in tasks]
        rows = [row for rs in results for row in rs]
        path = config.out + ".csv"
        write_csv(path, columns, rows)
        outputs.append(path)

    elif config.mode == "phase":
        ctx = _context(cfg, spectral_cache)
        scfg = _solver_cfg(cfg)
        ph = cfg.get("phase", {})
        lo, hi = ph.get("bracket", [0.01, 1.0])
        res = find_alpha_sp(ctx, (float(lo), float(hi)), tol=float(ph.get("tol", 1e-2)), cfg=scfg)
        rows = [[float(v), a] for v, a in sorted(res["per_atom"].items())]
        rows.append(["min", res["alpha_sp"]])
        path = config.out + ".csv"
        write_csv(path, ["atom", "alpha_sp"], rows)
        outputs.append(path)

    elif config.mode == "gamp":
        ctx = _context(cfg, spectral_cache)
        g = cfg.get("gamp", {})
        d = int(g.get("d", 150))
        n_inst = int(g.get("n_instances", 1))
        n_test = int(g.get("n_test", 100_000))
        rows = []
        rng = np.random.default_rng(config.seed)
        for alpha in _alphas(cfg):
            for inst in range(n_inst):
                seed = int(rng.integers(0, 2**31 - 1))
                teacher, data = generate_instance(
                    d, ctx.gamma, float(alpha), ctx.prior, ctx.readout,
                    ctx.activation, ctx.channel, seed,
                )
                fit = gamp_rie_fit(
                    data.X, data.y, ctx.activation, teacher.v, ctx.channel.delta, table=ctx.table
                )
                if not fit.converged and not fit.matrix_skipped:
                    status = 2
                test_rng = np.random.default_rng(seed + 1)
                mse = 0.0
                left = n_test
                while left > 0:
                    b = min(20_000, left)
                    Xt = test_rng.standard_normal((d, b))
                    yt = ctx.channel.sample(teacher.post_activation(Xt), test_rng)
                    pred = predict(fit, Xt, ctx.activation)
                    mse += float(np.sum((yt - pred) ** 2))
                    left -= b
                se_q2 = fit.se_trace[-1][0] if fit.se_trace else np.nan
                rows.append([float(alpha), mse / n_test, se_q2, fit.iterations, seed])
        path = config.out + ".csv"
        write_csv(path, GAMP_COLUMNS, rows)
        outputs.append(path)

    elif config.mode == "mcmc":
        ctx = _context(cfg, spectral_cache)
        m = cfg.get("mcmc", {})
        d = int(m.get("d", 50))
        sampler = m.get("sampler", "metropolis")
        alphas = _alphas(cfg)
        rows = []
        columns = MCMC_COLUMNS + [f"Q_{ell}" for ell in range(1, 6)] + ["eps"]
        for alpha in alphas:
            teacher, data = generate_instance(
                d, ctx.gamma, float(alpha), ctx.prior, ctx.readout,
                ctx.activation, ctx.channel, config.seed,
            )
            snap = int(m.get("snapshot_every", 10))
            if sampler == "metropolis":
                chain = metropolis_binary(
                    data, teacher, init=m.get("init", "informative"),
                    sweeps=int(m.get("sweeps", 100)), seed=config.seed,
                    snapshot_every=snap, measure_every=snap,
                )
            elif sampler == "hmc":
                chain = hmc_gaussian(
                    data, teacher, init=m.get("init", "informative"),
                    n_iter=int(m.get("n_iter", 200)), seed=config.seed,
                    snapshot_every=snap,
                )
            else:
                raise ConfigError(f"unknown sampler {sampler!r}")
            for idx, W in enumerate(chain.samples):
                ov = measure_overlaps(W, teacher, ctx.readout)
                eps = empirical_gen_error(teacher, W, mode="gibbs_halved", n_test=20_000, seed=config.seed + idx)
                it = (idx + 1) * snap
                energy = chain.energies[min(idx, len(chain.energies) - 1)] if len(chain.energies) else np.nan
                acc = chain.acceptance[min(idx, len(chain.acceptance) - 1)] if len(chain.acceptance) else np.nan
                rows.append(
                    [it, energy, acc, ov["q2"], *ov["Q_ell"], eps]
                )
        path = config.out + ".csv"
        write_csv(path, columns, rows)
        outputs.append(path)

    write_manifest(config.out + ".manifest.json", config, time.time() - t0, outputs)
    return status


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="widebayes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("theory", "phase", "gamp", "mcmc", "spectrum"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--spectral-cache", default=None)
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        config = RunConfig.load(args.config)
    except (ConfigError, OSError, KeyError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if config.mode != args.command:
        print(f"config error: config mode {config.mode!r} != subcommand {args.command!r}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config.seed = args.seed
        config.raw["seed"] = args.seed
    if args.out is not None:
        config.out = args.out
        config.raw["out"] = args.out
    try:
        return run(config, jobs=args.jobs, spectral_cache=args.spectral_cache)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
