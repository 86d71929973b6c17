"""Derive the shipped crop certificates and write them into a config file.

The storage matrix is fixed to the identity (a1 = a2 = 1) and mu to 0.48; the
common gain s_v = s_y is the smallest one passing the configured sampling
grid, inflated by a safety factor and rounded up to two significant digits.
The exponential IOSS certificate is derived the same way for a fixed c_x; its
gains are floored at the order of magnitude of the full-order weights, which
keeps both estimators' costs on a comparable scale (any gain above the
required one is still a valid certificate).

    python3 scripts/derive_crop_certificates.py [--config PATH] [--write]
"""
from __future__ import annotations

import argparse
import math

import numpy as np

from uise.config import load_config, update_config_file
from uise.detectability import ExpIossCertificate, required_exp_ioss_gain, required_gain
from uise.experiment import build_setup, certificate_grid, default_config_path, exp_ioss_pairs


def round_up(x: float, digits: int = 2) -> float:
    if x <= 0:
        return 0.0
    e = math.floor(math.log10(x)) - digits + 1
    return float(math.ceil(x / 10.0**e) * 10.0**e)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(default_config_path()))
    ap.add_argument("--mu", type=float, default=0.48)
    ap.add_argument("--c-x", type=float, default=2.5)
    ap.add_argument("--safety", type=float, default=1.25)
    ap.add_argument("--ioss-floor", type=float, default=1e10,
                    help="lower bound of the shipped IOSS gains (larger gains stay valid)")
    ap.add_argument("--write", action="store_true", help="update the config file in place")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    setup = build_setup(cfg, 1)
    grid = certificate_grid(cfg, setup.model)
    g_star = required_gain(setup.model, np.eye(3), args.mu, grid)
    gain = round_up(args.safety * g_star)
    print(f"lyapunov: {len(grid)} pairs, required gain {g_star:.4g}, shipped {gain:.4g}")

    pairs = exp_ioss_pairs(cfg, setup.reduced)
    shape = ExpIossCertificate(args.mu, args.c_x, 1.0, 1.0, 1.0)
    c_star = required_exp_ioss_gain(shape, pairs)
    c = max(round_up(args.safety * c_star), args.ioss_floor)
    print(f"exp-ioss: {len(pairs)} pairs, required gain {c_star:.4g}, shipped {c:.4g}")

    if args.write:
        update_config_file(args.config, {
            "cert.lyapunov.P": np.eye(3), "cert.lyapunov.mu": args.mu, "cert.lyapunov.a1": 1.0,
            "cert.lyapunov.a2": 1.0, "cert.lyapunov.s_v": gain, "cert.lyapunov.s_y": gain,
            "cert.exp_ioss.mu": args.mu, "cert.exp_ioss.c_x": args.c_x, "cert.exp_ioss.c_v": c,
            "cert.exp_ioss.c_y": c, "cert.exp_ioss.c_gamma": c,
        })
        print(f"wrote {args.config}")


if __name__ == "__main__":
    main()
