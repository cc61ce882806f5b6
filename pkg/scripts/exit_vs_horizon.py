"""Exit probability against horizon for the tangent and isotropic disk models.

    python3 scripts/exit_vs_horizon.py --n-paths 2000 --out exit_vs_horizon.csv
"""

import argparse
import csv
import sys

from viab.domains import BallDomain
from viab.paths import CadlagPath
from viab.sde import SimConfig, coefficients_from_spec
from viab.viability import estimate_exit_probability

MODELS = {
    "tangent": ({"name": "linear_drift", "lambda": 1.0}, {"name": "rot_tangent_sigma", "c": 1.0}),
    "weak_drift": ({"name": "linear_drift", "lambda": 0.25}, {"name": "rot_tangent_sigma", "c": 1.0}),
    "path_scaled": ({"name": "linear_drift", "lambda": 3.0}, {"name": "path_scaled_rot_sigma", "c": 1.0}),
    "isotropic": ("zero_drift", {"name": "iso_sigma", "c": 1.0}),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", nargs="+", default=list(MODELS), choices=list(MODELS))
    ap.add_argument("--horizons", nargs="+", type=float, default=[0.5, 1.0, 2.0, 5.0, 10.0])
    ap.add_argument("--n-paths", type=int, default=2000)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--start", nargs=2, type=float, default=[0.5, 0.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    args = ap.parse_args(argv)

    D = BallDomain([0.0, 0.0], 1.0)
    hist = CadlagPath.constant(args.start)
    sim = SimConfig(dt=args.dt, horizon=max(args.horizons), seed=args.seed, n_paths=args.n_paths)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["model", "horizon", "n_paths", "n_exited", "p_hat", "ci_low", "ci_high"])
    for name in args.models:
        coeffs = coefficients_from_spec(*MODELS[name])
        for e in estimate_exit_probability(D, coeffs, hist, sim, args.horizons, args.threads):
            w.writerow([name, e.horizon, e.n_paths, e.n_exited, repr(e.p_hat), repr(e.ci_low), repr(e.ci_high)])
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
