"""Batch command-line front end.

Subcommands: ``run`` (ensemble + checks + CSV/JSON outputs),
``validate-kernel`` (positivity gate + empirical correlation fidelity),
``invariance`` (random-unitary base-change consistency), ``novikov``
(identity verification batch) and ``preset export``.

Exit codes are a stable contract: 0 all checks pass, 1 a check failed,
2 usage or config error, 3 inadmissible kernel.  Given one seed, outputs are
byte-identical across runs and worker counts.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, preset_to_config
from .kernels import (
    OUParams,
    PositivityError,
    WhiteNoiseSpec,
    build_block_covariance,
    check_positivity,
    exponential_kernel,
    white_kernel,
)
from .noise import RngStreamSpec, build_path_sampler, estimate_correlations
from .novikov import default_batch, novikov_check
from .operators import random_unitary
from .scenarios import ENSEMBLE_FREE, run_checks
from .unraveling import Closure, invariance_check, run_ensemble
from .noise import NoiseRealization

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_BAD_KERNEL = 3


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_observables_csv(path, grid, columns):
    """columns: list of (name, complex array, stderr array or None)."""
    with open(path, "w") as f:
        header = ["t"]
        for name, _, se in columns:
            header += [f"{name}_re", f"{name}_im"]
            if se is not None:
                header.append(f"{name}_stderr")
        f.write(",".join(header) + "\n")
        for i, t in enumerate(grid):
            row = [_fmt(t)]
            for _, vals, se in columns:
                v = complex(vals[i])
                row += [_fmt(v.real), _fmt(v.imag)]
                if se is not None:
                    row.append(_fmt(float(se[i])))
            f.write(",".join(row) + "\n")


def write_mean_rho_csv(path, grid, rho, stderr=None):
    dim = rho.shape[1]
    with open(path, "w") as f:
        header = ["t"]
        for i in range(dim):
            for j in range(dim):
                header += [f"rho_{i}{j}_re", f"rho_{i}{j}_im"]
                if stderr is not None:
                    header.append(f"rho_{i}{j}_stderr")
        f.write(",".join(header) + "\n")
        for it, t in enumerate(grid):
            row = [_fmt(t)]
            for i in range(dim):
                for j in range(dim):
                    v = rho[it, i, j]
                    row += [_fmt(v.real), _fmt(v.imag)]
                    if stderr is not None:
                        row.append(_fmt(float(stderr[it, i, j])))
            f.write(",".join(row) + "\n")


def _outdir(args) -> str:
    out = os.environ.get("NMSSE_OUT", getattr(args, "out", None) or "out")
    os.makedirs(out, exist_ok=True)
    return out


def _config_from_args(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = RunConfig(scenario=args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if getattr(args, "ensemble", None):
        cfg.ensemble = args.ensemble
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "dt", None):
        cfg.dt = args.dt
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "check", None):
        cfg.checks = [c.strip() for c in args.check.split(",") if c.strip()]
    return cfg


def _write_manifest(out, cfg, wall, verdicts, extra=None):
    manifest = {
        "config": cfg.to_dict(),
        "artifact_version": __version__,
        "wall_time_s": wall,
        "checks": [
            {"name": v.name, "measured": v.measured, "bound": v.bound, "pass": bool(v.passed)}
            for v in verdicts
        ],
    }
    manifest.update(extra or {})
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    sc = cfg.build_scenario()
    out = _outdir(args)
    m = cfg.ensemble or sc.default_ensemble
    seed = cfg.seed if cfg.seed is not None else sc.default_seed
    dt = cfg.dt or sc.dt
    check_names = tuple(cfg.checks) if cfg.checks is not None else sc.checks

    gate = check_positivity(build_block_covariance(sc.kernel, sc.positivity_grid()))
    if not gate.passed:
        print(f"inadmissible kernel: min eigenvalue {gate.min_eigenvalue:.3e}", file=sys.stderr)
        return EXIT_BAD_KERNEL

    t0 = time.perf_counter()
    acc = run_ensemble(
        sc.model, sc.kernel, sc.closure, m, seed, dt, sc.grid, sc.psi0,
        observables=sc.observables, threads=cfg.threads,
    )
    verdicts = run_checks(sc, acc, check_names)
    wall = time.perf_counter() - t0

    columns = [("trace", acc.trace_mean.astype(complex), acc.trace_stderr)]
    for name in sc.observables:
        columns.append((name, acc.observable_mean(name), acc.observable_stderr(name)))
    write_observables_csv(os.path.join(out, "observables.csv"), sc.grid, columns)
    write_mean_rho_csv(os.path.join(out, "mean_rho.csv"), sc.grid, acc.mean_rho, acc.rho_stderr)
    _write_manifest(out, cfg, wall, verdicts, {"ensemble": m, "seed": seed, "blown": acc.blown})

    for v in verdicts:
        print(f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: measured={v.measured:.6g} bound={v.bound:.6g}")
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_CHECK_FAILED


def cmd_validate_kernel(args) -> int:
    cfg = _config_from_args(args)
    sc = cfg.build_scenario()
    out = _outdir(args)
    m = cfg.ensemble or 20000
    seed = cfg.seed if cfg.seed is not None else sc.default_seed

    sub = sc.grid[: 16 * max((len(sc.grid) - 1) // 15, 1) + 1 : max((len(sc.grid) - 1) // 15, 1)]
    report = check_positivity(build_block_covariance(sc.kernel, sub))
    result = {"min_eigenvalue": report.min_eigenvalue, "positivity_pass": bool(report.passed)}
    if not report.passed:
        with open(os.path.join(out, "validate.json"), "w") as f:
            json.dump(result, f, indent=2)
        print(f"inadmissible kernel: min eigenvalue {report.min_eigenvalue:.3e}", file=sys.stderr)
        return EXIT_BAD_KERNEL

    sampler = build_path_sampler(sc.kernel, sub)
    z = sampler.sample_batch(RngStreamSpec(seed, 0).generator(), m)
    emp = estimate_correlations((z, sub))
    chi_ref = np.transpose(sc.kernel.chi_at(sub[:, None], sub[None, :]), (2, 3, 0, 1))
    eta_ref = np.transpose(sc.kernel.eta_at(sub[:, None], sub[None, :]), (2, 3, 0, 1))
    ok_chi = np.abs(emp.chi_hat - chi_ref) <= 4.0 * np.where(emp.chi_stderr > 0, emp.chi_stderr, 1e-30)
    ok_eta = np.abs(emp.eta_hat - eta_ref) <= 4.0 * np.where(emp.eta_stderr > 0, emp.eta_stderr, 1e-30)
    frac = float(np.mean(np.concatenate([ok_chi.ravel(), ok_eta.ravel()])))
    result.update({"fidelity_fraction": frac, "fidelity_pass": frac >= 0.99, "samples": m})

    from .noise import correlations_to_csv

    correlations_to_csv(emp, os.path.join(out, "correlations.csv"))
    with open(os.path.join(out, "validate.json"), "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    print(f"positivity: min eigenvalue {report.min_eigenvalue:.3e}; fidelity {frac:.4f}")
    return EXIT_OK if result["fidelity_pass"] else EXIT_CHECK_FAILED


def cmd_invariance(args) -> int:
    cfg = _config_from_args(args)
    sc = cfg.build_scenario()
    out = _outdir(args)
    seed = cfg.seed if cfg.seed is not None else sc.default_seed
    trials = args.trials
    closure = sc.closure if sc.closure in (Closure.TCL2, Closure.CONVOLUTED) else Closure.TCL2

    n = sc.model.n_channels
    fine = sc.grid[0] + (sc.dt / 2.0) * np.arange(2 * (len(sc.grid) - 1) + 1)
    sampler = build_path_sampler(sc.kernel, fine)
    rng = RngStreamSpec(seed, 0).generator()
    worst = 0.0
    for _ in range(trials):
        u = random_unitary(n, rng)
        z = sampler.sample_batch(rng, 1)[0]
        nr = NoiseRealization(grid=fine, values=z)
        dev = invariance_check(sc.model, sc.kernel, closure, nr, u, sc.dt, sc.psi0)
        worst = max(worst, dev)
    passed = worst <= 1e-9
    with open(os.path.join(out, "invariance.json"), "w") as f:
        json.dump({"max_deviation": worst, "bound": 1e-9, "pass": passed, "trials": trials}, f, indent=2)
    print(f"[{'PASS' if passed else 'FAIL'}] unitary invariance: max deviation {worst:.3e} over {trials} trials")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_novikov(args) -> int:
    out = _outdir(args)
    m = args.ensemble or 100_000
    seed = args.seed if args.seed is not None else 404
    grid = np.linspace(0.0, 1.0, 21)
    kernels = {
        "exponential": exponential_kernel(OUParams(gamma=1.0, omega=0.0, d=2.0, d_prime=0.0)),
        "exponential-anomalous": exponential_kernel(OUParams(gamma=1.0, omega=0.5, d=2.0, d_prime=1.2)),
        "white": white_kernel(WhiteNoiseSpec(c=np.zeros((1, 1)), epsilon=0.05)),
        "white-anomalous": white_kernel(WhiteNoiseSpec(c=0.5 * np.eye(1), epsilon=0.05)),
    }
    reports = []
    stream = 0
    for kname, tf, k, t in default_batch(kernels, grid):
        rep = novikov_check(tf, k, grid, t, m, RngStreamSpec(seed, stream))
        stream += 1
        reports.append((kname, rep))
    table = [
        {
            "kernel": kname,
            "kind": r.kind,
            "t": r.t,
            "lhs": [r.lhs.real, r.lhs.imag],
            "rhs": [r.rhs.real, r.rhs.imag],
            "stderr": r.stderr,
            "z_score": r.z_score,
        }
        for kname, r in reports
    ]
    max_z = max(r.z_score for _, r in reports)
    passed = max_z <= args.z_bound
    with open(os.path.join(out, "novikov.json"), "w") as f:
        json.dump({"reports": table, "max_z_score": max_z, "bound": args.z_bound, "pass": passed},
                  f, indent=2, sort_keys=True)
    for kname, r in reports:
        print(f"[{'PASS' if r.z_score <= args.z_bound else 'FAIL'}] {kname}/{r.kind} t={r.t:g}: z={r.z_score:.2f}")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_preset(args) -> int:
    if args.action != "export":
        raise ConfigError("supported preset action: export")
    doc = preset_to_config(args.name)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmsse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ensemble=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", help="named scenario preset")
        if ensemble:
            sp.add_argument("--ensemble", type=int, help="number of trajectories / samples")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory (env NMSSE_OUT overrides)")

    sp = sub.add_parser("run", help="integrate an ensemble and run its checks")
    common(sp)
    sp.add_argument("--dt", type=float, help="integrator step")
    sp.add_argument("--threads", type=int, help="worker threads")
    sp.add_argument("--check", help="comma-separated check names (default: scenario's list)")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("validate-kernel", help="positivity gate + sampling fidelity")
    common(sp)
    sp.set_defaults(fn=cmd_validate_kernel)

    sp = sub.add_parser("invariance", help="random-unitary base-change consistency")
    common(sp, ensemble=False)
    sp.add_argument("--trials", type=int, default=10)
    sp.set_defaults(fn=cmd_invariance)

    sp = sub.add_parser("novikov", help="verify the Novikov identity batch")
    sp.add_argument("--ensemble", type=int, help="Monte Carlo samples per combination")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--z-bound", type=float, default=4.0)
    sp.set_defaults(fn=cmd_novikov)

    sp = sub.add_parser("preset", help="preset utilities")
    sp.add_argument("action", choices=["export"])
    sp.add_argument("name")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(fn=cmd_preset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PositivityError as exc:
        print(f"inadmissible kernel: {exc}", file=sys.stderr)
        return EXIT_BAD_KERNEL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
