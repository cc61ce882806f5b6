"""``viab``: batch runner for viability checks.

Exit codes: 0 pass, 1 fail, 2 usage or config error, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import functional_calculus as fc
from .config import ConfigError, ExperimentConfig, load_config
from .domains import Barrier, domain_from_spec
from .paths import CadlagPath
from .sde import DRIFT_CATALOG, SIGMA_CATALOG, SimConfig, coefficients_from_spec
from .viability import (
    CONSISTENT,
    RoundtripProtocol,
    check_condition_ii,
    default_start,
    estimate_exit_probability,
    lyapunov_scan,
    smallest_inner_index,
    supermartingale_check,
    theorem_roundtrip,
)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 1, 2, 3
OUT_DIR_ENV = "VIAB_OUT_DIR"
DEFAULT_OUT_DIR = "viab_out"


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Artifacts:
    def __init__(self, out_dir: Path, config_hash: str, seed: int):
        self.dir = out_dir
        self.stamp = f"config_hash={config_hash}, seed={seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def csv(self, name: str, header: list[str], rows) -> None:
        p = self.dir / name
        with p.open("w", newline="") as fh:
            fh.write(f"# {self.stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.written.append(p)

    def json(self, name: str, doc: dict) -> None:
        p = self.dir / name
        with p.open("w") as fh:
            json.dump(_clean(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(p)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out_dir or cfg.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _build(cfg: ExperimentConfig):
    D = domain_from_spec(cfg.domain)
    coeffs = coefficients_from_spec(cfg.drift, cfg.sigma, cfg.dim)
    return D, coeffs


def _condition_rows(rep):
    n = len(rep.records[0]["endpoint"]) if rep.records else 0
    header = ["t", "index", "tangency_residual", "generator_value", "roughness"] + [f"x{i}" for i in range(n)]
    rows = [[r["t"], r["index"], r["tangency_residual"], r["generator_value"], r["roughness"], *r["endpoint"]]
            for r in rep.records]
    return header, rows


def _exit_rows(exits, closure):
    header = ["mode", "depth", "horizon", "n_paths", "n_exited", "p_hat", "ci_low", "ci_high"]
    rows = [[e.mode, e.level, e.horizon, e.n_paths, e.n_exited, e.p_hat, e.ci_low, e.ci_high]
            for e in list(exits) + list(closure)]
    return header, rows


def _write_lyapunov(art: Artifacts, lyap) -> None:
    art.csv("lyapunov_levels.csv", ["kind", "b", "n", "max", "mean"],
            [[lv["kind"], lv["b"], lv["n"], lv["max"], lv["mean"]] for lv in lyap.levels])
    art.csv("lyapunov_samples.csv", ["b", "L_psi"], lyap.samples)


def _write_sm(art: Artifacts, sm) -> None:
    art.csv("supermartingale.csv", ["checkpoint", "mean_psi", "standard_error", "bound", "slack"],
            zip(sm.checkpoints, sm.means, sm.standard_errors, sm.bounds, sm.slacks))


def _protocol(cfg: ExperimentConfig, threads: int) -> RoundtripProtocol:
    return RoundtripProtocol(
        boundary_times=cfg.boundary_times, n_per_time=cfg.n_per_time, seed=cfg.seed, dt=cfg.dt,
        horizons=cfg.horizons, n_paths=cfg.n_paths, start=cfg.start,
        closure_depth_fractions=cfg.closure_depth_fractions, n_closure_paths=cfg.closure_n_paths,
        lyapunov_n=cfg.lyapunov_n, inner_index=cfg.sm_inner_index, checkpoints=cfg.sm_checkpoints,
        n_supermartingale_paths=cfg.sm_n_paths, tol_generator=cfg.tol_generator,
        tol_tangency=cfg.tol_tangency, threads=threads,
    )


def run_experiment(cfg: ExperimentConfig, out_dir: Path, threads: int = 1, echo=print) -> int:
    D, coeffs = _build(cfg)
    art = Artifacts(out_dir, cfg.config_hash(), cfg.seed)
    report: dict = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "checks": list(cfg.checks)}
    outcomes: list[str] = []
    lines = [f"domain {cfg.domain['kind']} dim={cfg.dim}, coefficients {coeffs.name}, seed {cfg.seed}"]

    if "roundtrip" in cfg.checks:
        rt = theorem_roundtrip(D, coeffs, _protocol(cfg, threads))
        report.update(rt.to_dict())
        art.csv("condition_ii_samples.csv", *_condition_rows(rt.condition))
        art.csv("exit_vs_horizon.csv", *_exit_rows(rt.exits, rt.closure_exits))
        _write_lyapunov(art, rt.lyapunov)
        if rt.supermartingale is not None:
            _write_sm(art, rt.supermartingale)
        cond = rt.condition
        lines.append(f"condition (ii): {cond.verdict}  worst tangency {cond.worst_tangency:.3g} "
                     f"(tol {cond.tol_tangency:.1g}), worst generator {cond.worst_generator:.6g}")
        for e in rt.exits:
            lines.append(f"exit T={e.horizon:g}: {e.n_exited}/{e.n_paths}  p_hat={e.p_hat:.4g} "
                         f"CI=[{e.ci_low:.3g}, {e.ci_high:.3g}]")
        for e in rt.closure_exits:
            lines.append(f"closure exit depth={e.level:.4g}: {e.n_exited}/{e.n_paths}  CI upper {e.ci_high:.3g}")
        lines.append(f"lyapunov: M_hat={rt.lyapunov.M_hat:.6g}  divergence={rt.lyapunov.divergence}")
        if rt.supermartingale is not None:
            lines.append(f"supermartingale: holds={rt.supermartingale.holds}  "
                         f"worst slack {rt.supermartingale.worst_slack:.4g}")
        lines.append(f"verdict: {rt.verdict}")
        lines.extend(f"  - {d}" for d in rt.diagnostics)
        if not cond.passed:
            lines.append("tangency/generator failures (worst first):")
            for r in cond.worst_offenders:
                lines.append(f"  t={r['t']:g} #{r['index']}: tangency {r['tangency_residual']:.4g}, "
                             f"generator {r['generator_value']:.4g} at {np.round(r['endpoint'], 4).tolist()}")
        if rt.verdict == CONSISTENT:
            outcomes.append("pass" if cond.passed else "fail")
        else:
            outcomes.append("inconclusive")
    else:
        lyap = None
        if "condition_ii" in cfg.checks:
            cond = check_condition_ii(D, coeffs, cfg.boundary_times, cfg.n_per_time, cfg.tol_tangency,
                                      cfg.tol_generator, cfg.seed)
            report["condition_ii"] = cond.to_dict()
            art.csv("condition_ii_samples.csv", *_condition_rows(cond))
            lines.append(f"condition (ii): {cond.verdict}  worst tangency {cond.worst_tangency:.3g}, "
                         f"worst generator {cond.worst_generator:.6g}")
            outcomes.append("inconclusive" if cond.passed and cond.borderline else cond.verdict)
        start = np.asarray(cfg.start, float) if cfg.start is not None else default_start(D, cfg.seed)
        history = CadlagPath.constant(start)
        if "exit" in cfg.checks:
            sim = SimConfig(dt=cfg.dt, horizon=max(cfg.horizons), seed=cfg.seed, n_paths=cfg.n_paths)
            exits = estimate_exit_probability(D, coeffs, history, sim, cfg.horizons, threads)
            report["exit"] = {"interior": [e.to_dict() for e in exits], "closure": []}
            art.csv("exit_vs_horizon.csv", *_exit_rows(exits, []))
            for e in exits:
                lines.append(f"exit T={e.horizon:g}: {e.n_exited}/{e.n_paths}  CI=[{e.ci_low:.3g}, {e.ci_high:.3g}]")
            outcomes.append("pass" if all(e.n_exited == 0 for e in exits) else "fail")
        if "lyapunov" in cfg.checks or "supermartingale" in cfg.checks:
            barrier = Barrier(D)
            lyap = lyapunov_scan(D, barrier, coeffs, n=cfg.lyapunov_n, seed=cfg.seed)
            report["lyapunov"] = lyap.to_dict()
            _write_lyapunov(art, lyap)
            lines.append(f"lyapunov: M_hat={lyap.M_hat:.6g}  divergence={lyap.divergence}")
            if "lyapunov" in cfg.checks:
                outcomes.append("fail" if lyap.divergence else "pass")
            if "supermartingale" in cfg.checks:
                i = cfg.sm_inner_index or smallest_inner_index(D)
                sim = SimConfig(dt=cfg.dt, horizon=max(cfg.sm_checkpoints), seed=cfg.seed + 3, n_paths=cfg.sm_n_paths)
                sm = supermartingale_check(D, barrier, coeffs, history, sim, i, cfg.sm_checkpoints, lyap.M_hat, threads)
                report["lyapunov"]["supermartingale"] = sm.to_dict()
                _write_sm(art, sm)
                lines.append(f"supermartingale: holds={sm.holds}  worst slack {sm.worst_slack:.4g}")
                outcomes.append("pass" if sm.holds else "fail")
        if "ito_verify" in cfg.checks:
            ok = _ito(cfg, art, report, lines, coeffs)
            outcomes.append("pass" if ok else "fail")
        verdicts = set(outcomes)
        report["verdict"] = ("PASS" if verdicts == {"pass"} else "FAIL" if verdicts == {"fail"} else "INCONCLUSIVE")
        lines.append(f"verdict: {report['verdict']}")

    if "roundtrip" in cfg.checks and "ito_verify" in cfg.checks:
        ok = _ito(cfg, art, report, lines, coeffs)
        outcomes.append("pass" if ok else "fail")
    art.json("report.json", report)
    lines.append(f"artifacts in {out_dir}")
    echo("\n".join(lines))
    s = set(outcomes)
    if "inconclusive" in s or ("pass" in s and "fail" in s):
        return EXIT_INCONCLUSIVE
    return EXIT_FAIL if "fail" in s else EXIT_PASS


def _ito(cfg: ExperimentConfig, art: Artifacts, report: dict, lines: list[str], coeffs) -> bool:
    it = cfg.ito
    spec = dict(it.functional)
    name = spec.pop("name")
    factory = fc.FUNCTIONAL_CATALOG[name]
    args = {k: (np.asarray(v, float) if isinstance(v, list) else v) for k, v in spec.items()}
    F = factory(**args)
    rungs = fc.residual_ladder(F, coeffs, CadlagPath.constant(np.asarray(it.start, float)), it.dts,
                               it.n_seeds, it.horizon, cfg.seed)
    ok = fc.ladder_decreasing(rungs)
    art.csv("ito_residuals.csv", ["dt", "rms", "standard_error", "mean_abs", "max_abs"],
            [[r.dt, r.rms, r.se, r.mean_abs, r.max_abs] for r in rungs])
    report["ito_verify"] = {
        "functional": name, "n_seeds": it.n_seeds, "horizon": it.horizon, "passed": ok,
        "rungs": [{"dt": r.dt, "rms": r.rms, "standard_error": r.se, "max_abs": r.max_abs} for r in rungs],
    }
    lines.append("ito residual ladder:")
    for r in rungs:
        lines.append(f"  dt={r.dt:g}  rms={r.rms:.4g} +- {r.se:.2g}  max={r.max_abs:.3g}")
    lines.append(f"  decreasing within noise: {ok}")
    return ok


# --- commands ----------------------------------------------------------------


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    t0 = time.perf_counter()
    code = run_experiment(cfg, _out_dir(args, cfg), args.threads)
    print(f"finished in {time.perf_counter() - t0:.1f} s, exit code {code}")
    return code


def cmd_ito_verify(args) -> int:
    cfg = _load(args)
    if cfg.ito is None:
        raise ConfigError("config has no [ito_verify] section", args.config)
    cfg = replace(cfg, checks=("ito_verify",))
    return run_experiment(cfg, _out_dir(args, cfg), args.threads)


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"{args.config}: ok (config_hash {cfg.config_hash()})")
    return EXIT_PASS


def cmd_catalog(args) -> int:
    print("drift:")
    for name, (_, params) in DRIFT_CATALOG.items():
        print(f"  {name}{{{', '.join(params)}}}")
    print("sigma:")
    for name, (_, params) in SIGMA_CATALOG.items():
        print(f"  {name}{{{', '.join(params)}}}")
    print("functionals:")
    for name in fc.FUNCTIONAL_CATALOG:
        print(f"  {name}")
    print("domains:\n  ball{center, radius}\n  ellipsoid{center, semi_axes}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viab", description="Viability checks for path-dependent SDEs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, outputs=True):
        sp.add_argument("config", help="TOML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override [sim].seed")
        if outputs:
            sp.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or {DEFAULT_OUT_DIR})")
            sp.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")

    sp = sub.add_parser("run", help="run the checks selected in the config")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("ito-verify", help="functional Itô residual over a dt ladder")
    common(sp)
    sp.set_defaults(func=cmd_ito_verify)
    sp = sub.add_parser("validate", help="parse and validate a config")
    common(sp, outputs=False)
    sp.set_defaults(func=cmd_validate)
    sp = sub.add_parser("catalog", help="list coefficient, functional and domain names")
    sp.set_defaults(func=cmd_catalog)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_PASS
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
