"""Command line interface.

Exit codes: 0 success, 1 config error, 2 solver failures above the allowed
fraction, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config, parse_config
from .detectability import (
    LyapunovCertificate,
    check_exp_ioss,
    check_linear_strong_detectability,
    check_lyapunov_certificate,
    min_horizon_full_order,
    min_horizon_two_stage,
    two_stage_horizon,
)
from .errors import ConfigError
from .experiment import (
    NOISELESS,
    NOISY,
    ExperimentConfig,
    _atomic_write,
    bench_table_text,
    bench_timing,
    build_setup,
    certificate_grid,
    default_config,
    emit_plot_data,
    exp_ioss_from_config,
    exp_ioss_pairs,
    lyapunov_from_config,
    run_experiment,
    simulate_truth,
    truth_csv_text,
    write_bench,
)

log = logging.getLogger("uise")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3


def _load(args) -> Config:
    return default_config() if args.config is None else load_config(args.config)


def _experiment(args) -> ExperimentConfig:
    cfg = _load(args)
    noise = None
    if getattr(args, "noisy", False):
        noise = NOISY
    elif getattr(args, "noiseless", False):
        noise = NOISELESS
    return ExperimentConfig.from_config(cfg, seed=args.seed, out_dir=args.out, noise=noise,
                                        steps=getattr(args, "steps", None))


def cmd_simulate(args) -> int:
    exp = _experiment(args)
    setup = build_setup(exp.config, exp.steps)
    tr = simulate_truth(exp, setup)
    path = exp.out_dir / "truth.csv"
    _atomic_write(path, truth_csv_text(setup.model, tr))
    print(f"wrote {path} ({tr.length} steps, {exp.noise})")
    return EXIT_OK


def cmd_estimate(args) -> int:
    exp = _experiment(args)
    if args.estimators:
        exp.estimators = [s.strip() for s in args.estimators.split(",") if s.strip()]
    if args.max_failure_fraction is not None:
        exp.max_failure_fraction = args.max_failure_fraction
    art = run_experiment(exp)
    for name, s in art.summary["estimators"].items():
        print(f"{name:12s} last10% max error {s['last10_max_error_norm']:.3e}  "
              f"mean step {s['wall_time_ms']['mean']:.1f} ms  failures {s['solver_failures']}/{s['steps']}")
    print(f"artifacts in {art.out_dir}")
    if art.failure_fraction() > exp.max_failure_fraction:
        print(f"solver failure fraction {art.failure_fraction():.2f} exceeds {exp.max_failure_fraction}",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_bench(args) -> int:
    exp = _experiment(args)
    regimes = (NOISY,) if args.noisy else (NOISELESS,) if args.noiseless else (NOISELESS, NOISY)
    table = bench_timing(exp, args.repeats, regimes)
    write_bench(table, exp.out_dir)
    print(bench_table_text(table, "md"), end="")
    return EXIT_OK


def _matrix(text: str) -> np.ndarray:
    return parse_config(f"m = {text}").get_matrix("m")


def cmd_check_detect(args) -> int:
    if args.A is not None:
        if args.B is None or args.C is None:
            raise ConfigError("--A needs --B and --C")
        rep = check_linear_strong_detectability(_matrix(args.A), _matrix(args.B), _matrix(args.C), args.tol)
        out = {"rank_B": rep.rank_B, "rank_CB": rep.rank_CB, "rank_condition_holds": rep.rank_condition_holds,
               "spectral_radius": rep.spectral_radius, "strongly_detectable": rep.strongly_detectable,
               "error_dynamics_matrix": None if rep.error_dynamics_matrix is None
               else rep.error_dynamics_matrix.tolist()}
        text = json.dumps(out, indent=2)
    else:
        cfg = _load(args)
        setup = build_setup(cfg, 1)
        lyap = lyapunov_from_config(cfg.section("cert.lyapunov"))
        ioss = exp_ioss_from_config(cfg.section("cert.exp_ioss"))
        if args.mu is not None:
            lyap, ioss = lyap.with_mu(args.mu), ioss.with_mu(args.mu)
        reports = {"lyapunov": json.loads(check_lyapunov_certificate(setup.model, lyap,
                                                                     certificate_grid(cfg, setup.model)).to_json())}
        if setup.reduced is not None:
            rep = check_exp_ioss(setup.reduced, ioss, exp_ioss_pairs(cfg, setup.reduced))
            reports["exp_ioss"] = json.loads(rep.to_json())
        if cfg.get_str("model", "crop") == "linear":
            lin = cfg.section("linear")
            rep = check_linear_strong_detectability(lin.get_matrix("A"), lin.get_matrix("E"), lin.get_matrix("C"))
            reports["linear"] = {"strongly_detectable": rep.strongly_detectable,
                                 "spectral_radius": rep.spectral_radius}
        text = json.dumps(reports, indent=2)
    if args.out:
        _atomic_write(Path(args.out) / "detectability.json", text + "\n")
    print(text)
    return EXIT_OK


def cmd_horizon(args) -> int:
    if args.c_x is not None or args.a1 is not None:
        if args.mu is None:
            raise ConfigError("--mu is required with explicit certificate coefficients")
    cfg = None if (args.c_x is not None and args.a1 is not None) else _load(args)
    if args.c_x is not None:
        if args.c_x < 1.0:
            print(f"note: c_x = {args.c_x} < 1 cannot come from a valid certificate; evaluating the formula only",
                  file=sys.stderr)
        n_two = two_stage_horizon(args.mu, args.c_x)
    else:
        ioss = exp_ioss_from_config(cfg.section("cert.exp_ioss"))
        if args.mu is not None:
            ioss = ioss.with_mu(args.mu)
        n_two = min_horizon_two_stage(ioss)
    if args.a1 is not None:
        a2 = args.a2 if args.a2 is not None else args.a1
        lyap = LyapunovCertificate(np.eye(1) * args.a1, args.mu, args.a1, max(a2, args.a1), 0.0, 0.0)
        if a2 < args.a1:
            raise ConfigError("a2 must be at least a1")
    else:
        lyap = lyapunov_from_config(cfg.section("cert.lyapunov"))
        if args.mu is not None:
            lyap = lyap.with_mu(args.mu)
    n_full = min_horizon_full_order(lyap, args.rho)
    print(json.dumps({"full_order": n_full if n_full is not None else "infeasible", "two_stage": n_two,
                      "rho": args.rho}))
    return EXIT_OK


def cmd_plot_data(args) -> int:
    path = emit_plot_data(args.out or "out", args.state)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uise", description="Unknown-input state estimation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, noise=True):
        p.add_argument("--config", help="key = value config (default: the shipped crop config)")
        p.add_argument("--seed", type=int, help="noise seed (overrides run.seed)")
        p.add_argument("--out", help="output directory (overrides run.out)")
        if noise:
            g = p.add_mutually_exclusive_group()
            g.add_argument("--noisy", action="store_true", help="force the noisy regime")
            g.add_argument("--noiseless", action="store_true", help="force the noiseless regime")
            p.add_argument("--steps", type=int, help="run length K (overrides run.steps)")

    p = sub.add_parser("simulate", help="simulate the truth and write truth.csv")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the configured estimators and write all artifacts")
    common(p)
    p.add_argument("--estimators", help="comma separated estimator names (overrides run.estimators)")
    p.add_argument("--max-failure-fraction", type=float)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="per-step timing table over repeated runs")
    common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check-detect", help="linear rank test or certificate falsification")
    common(p, noise=False)
    p.add_argument("--A", help="matrix, rows separated by ';'")
    p.add_argument("--B")
    p.add_argument("--C")
    p.add_argument("--tol", type=float)
    p.add_argument("--mu", type=float, help="replace the certificates' decay rate")
    p.set_defaults(func=cmd_check_detect)

    p = sub.add_parser("horizon", help="minimal horizons from the certificates")
    common(p, noise=False)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--mu", type=float)
    p.add_argument("--c-x", type=float)
    p.add_argument("--a1", type=float)
    p.add_argument("--a2", type=float)
    p.set_defaults(func=cmd_horizon)

    p = sub.add_parser("plot-data", help="long-format plot data from run artifacts")
    common(p, noise=False)
    p.add_argument("--state", help="state plotted against its estimates (default x_d1)")
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
