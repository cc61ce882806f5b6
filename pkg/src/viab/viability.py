"""Executable viability checks for a smooth domain under path-dependent dynamics.

The pieces, in the order :func:`theorem_roundtrip` runs them:

* :func:`check_condition_ii` evaluates the tangency residual
  ``|sigma^T grad b|`` and the generator of ``-b`` on sampled boundary paths.
* :func:`estimate_exit_probability` counts exits in Monte Carlo ensembles,
  from interior histories or from interior approximations of boundary
  histories (closure mode).
* :func:`lyapunov_scan` samples the generator of the barrier ``Psi`` down a
  ladder of tube levels and flags blow-up as ``b -> 0``.
* :func:`supermartingale_check` tests ``E Psi(X_{s ^ tau}) <= Psi(x) + M (s - t)``
  on ensembles stopped at an inner level set.

Finite horizons and finite samples can only ever support viability; the
reports say what was sampled and never claim more.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binomtest

from .domains import Barrier, DomainError, SmoothDomain, check_regularity, inner_domain
from .functional_calculus import generator_apply, neg_oriented_distance
from .paths import CadlagPath
from .sde import PathCoefficients, SimConfig, path_rng, simulate_paths

PASS, FAIL = "pass", "fail"
CONSISTENT, INCONCLUSIVE = "CONSISTENT", "INCONCLUSIVE"


# --- boundary paths ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoundaryPathSample:
    """A path that stays inside the domain before ``t`` and ends on its boundary."""

    path: CadlagPath
    t: float
    roughness: float = 0.0
    projected: bool = False


def _clamp_segment(D: SmoothDomain, x0: np.ndarray, x1: np.ndarray, margin: float) -> np.ndarray:
    # largest step fraction along x0 -> x1 keeping b >= margin (b(x0) >= margin)
    if D.b(x1) >= margin:
        return x1
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if D.b(x0 + mid * (x1 - x0)) >= margin:
            lo = mid
        else:
            hi = mid
    return x0 + lo * (x1 - x0)


def interior_history(
    D: SmoothDomain,
    coeffs: PathCoefficients,
    rng: np.random.Generator,
    t: float,
    n_steps: int,
    margin: float,
    roughness: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Grid ``j t / n_steps`` for ``j < n_steps`` and Euler values kept at ``b >= margin``.

    ``roughness`` adds independent Gaussian kicks of size ``roughness * sqrt(dt)``
    on top of the model noise, to spread the sampled histories.
    """
    dt = t / n_steps
    times = dt * np.arange(n_steps)
    x = D.sample_interior(rng, 1, min_b=margin)[0]
    vals = np.empty((n_steps, D.dim))
    vals[0] = x
    for j in range(1, n_steps):
        past = CadlagPath._trusted(times[:j], vals[:j].copy())
        mu = np.asarray(coeffs.mu(past), float)
        sig = np.asarray(coeffs.sigma(past), float)
        dw = math.sqrt(dt) * rng.standard_normal(coeffs.brownian_dim)
        kick = roughness * math.sqrt(dt) * rng.standard_normal(D.dim)
        x_new = x + mu * dt + sig @ dw + kick
        if not np.all(np.isfinite(x_new)):
            x_new = x
        x = _clamp_segment(D, x, x_new, margin)
        vals[j] = x
    return times, vals


@dataclass
class BoundaryPathSampler:
    """Stratified sampler over endpoint location, history roughness and length.

    Roughness levels are cycled through in order; ``margin`` defaults to a
    hundredth of the tube width.
    """

    n_hist_steps: int = 16
    roughness_levels: tuple[float, ...] = (0.0, 0.5, 2.0)
    margin: float | None = None
    coverage: dict = field(default_factory=dict)

    def sample(self, D: SmoothDomain, coeffs: PathCoefficients, t: float, n: int, seed: int) -> list[BoundaryPathSample]:
        if t < 0 or n < 1:
            raise ValueError("need t >= 0 and n >= 1")
        margin = self.margin if self.margin is not None else 0.01 * D.tube_width
        out = []
        n_proj = 0
        for k in range(n):
            rng = path_rng(seed, k)
            if t == 0.0:
                xb = D.sample_boundary(rng, 1)[0]
                out.append(BoundaryPathSample(CadlagPath([0.0], xb[None, :]), 0.0))
                continue
            rough = self.roughness_levels[k % len(self.roughness_levels)]
            times, vals = interior_history(D, coeffs, rng, t, self.n_hist_steps, margin, rough)
            end = vals[-1]
            projected = bool(D.b(end) < D.tube_width)
            xb = D.project(end) if projected else D.sample_boundary(rng, 1)[0]
            n_proj += projected
            path = CadlagPath(np.append(times, t), np.vstack([vals, xb]))
            out.append(BoundaryPathSample(path, t, rough, projected))
        self.coverage[t] = {
            "n": n,
            "projected": n_proj,
            "uniform_boundary": n - n_proj,
            "roughness_levels": list(self.roughness_levels) if t > 0 else [],
        }
        return out


def sample_boundary_paths(
    D: SmoothDomain, coeffs: PathCoefficients, t: float, n: int, seed: int, sampler: BoundaryPathSampler | None = None
) -> list[BoundaryPathSample]:
    return (sampler or BoundaryPathSampler()).sample(D, coeffs, t, n, seed)


def sample_is_valid(D: SmoothDomain, s: BoundaryPathSample, tol: float = 1e-10) -> bool:
    inner = s.path.values[:-1]
    ok_inner = inner.shape[0] == 0 or bool(np.all(np.asarray(D.b(inner)) > 0))
    return ok_inner and abs(float(D.b(s.path.endpoint))) <= tol


# --- condition (ii) ----------------------------------------------------------


@dataclass
class ConditionReport:
    records: list[dict]
    verdict: str
    tol_tangency: float
    tol_generator: float
    worst_tangency: float
    worst_generator: float
    borderline: bool
    worst_offenders: list[dict]
    cross_check_max_diff: float | None = None
    coverage: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    @property
    def margin(self) -> float:
        """Distance of the worst generator value below zero (negative on failure)."""
        return -self.worst_generator

    def to_dict(self, with_records: bool = False) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        d["n_samples"] = len(self.records)
        return d


def boundary_terms(D: SmoothDomain, coeffs: PathCoefficients, path: CadlagPath) -> tuple[float, float, float]:
    """Tangency residual, generator of ``-b`` and ``|sigma|_F`` at a boundary path."""
    xb = path.endpoint
    g = D.grad_b(xb)
    H = D.hess_b(xb)
    mu = np.asarray(coeffs.mu(path), float)
    sig = np.asarray(coeffs.sigma(path), float)
    tang = float(np.linalg.norm(sig.T @ g))
    gen = float(-(g @ mu) - 0.5 * np.sum(H * (sig @ sig.T)))
    return tang, gen, float(np.linalg.norm(sig))


def check_condition_ii(
    D: SmoothDomain,
    coeffs: PathCoefficients,
    times: Sequence[float] = (0.0, 0.5, 1.0),
    n_per_time: int = 100,
    tol_tangency: float | None = None,
    tol_generator: float = 1e-6,
    seed: int = 0,
    cross_check: bool = False,
    sampler: BoundaryPathSampler | None = None,
    n_worst: int = 5,
) -> ConditionReport:
    """Evaluate both boundary clauses on ``n_per_time`` sampled paths per final time.

    ``tol_tangency`` defaults to ``1e-6 (1 + max |sigma|_F)``.  A worst
    generator value within ``10 tol_generator`` of zero marks the report
    borderline.
    """
    reg = check_regularity(D)
    if not reg.passed:
        raise DomainError(f"domain failed the regularity check: {reg}")
    sampler = sampler or BoundaryPathSampler()
    F = neg_oriented_distance(D) if cross_check else None
    records = []
    diffs = []
    for i, t in enumerate(times):
        for j, s in enumerate(sampler.sample(D, coeffs, float(t), n_per_time, seed + 7919 * i)):
            tang, gen, snorm = boundary_terms(D, coeffs, s.path)
            rec = {"t": float(t), "index": j, "tangency_residual": tang, "generator_value": gen,
                   "sigma_norm": snorm, "endpoint": s.path.endpoint.tolist(), "roughness": s.roughness}
            if F is not None:
                fd = generator_apply(F, s.path, coeffs)
                rec["generator_fd"] = fd
                diffs.append(abs(fd - gen))
            records.append(rec)
    scale = max(r["sigma_norm"] for r in records)
    tol_t = tol_tangency if tol_tangency is not None else 1e-6 * (1.0 + scale)
    worst_t = max(r["tangency_residual"] for r in records)
    worst_g = max(r["generator_value"] for r in records)
    ok = worst_t <= tol_t and worst_g <= tol_generator
    offenders = sorted(
        records,
        key=lambda r: max(r["tangency_residual"] / tol_t, r["generator_value"] / tol_generator),
        reverse=True,
    )[:n_worst]
    return ConditionReport(
        records=records,
        verdict=PASS if ok else FAIL,
        tol_tangency=tol_t,
        tol_generator=tol_generator,
        worst_tangency=worst_t,
        worst_generator=worst_g,
        borderline=abs(worst_g) <= 10 * tol_generator,
        worst_offenders=[{k: v for k, v in r.items()} for r in offenders],
        cross_check_max_diff=max(diffs) if diffs else None,
        coverage=dict(sampler.coverage),
    )


# --- exits -------------------------------------------------------------------


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class ExitStats:
    n_paths: int
    n_exited: int
    p_hat: float
    ci_low: float
    ci_high: float
    horizon: float
    histogram_counts: list[int]
    histogram_edges: list[float]
    mean_exit_time: float | None = None
    mode: str = "interior"
    level: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def exit_stats(tau: np.ndarray, horizon: float, t_start: float, bins: int = 20, mode: str = "interior",
               level: float | None = None) -> ExitStats:
    """Statistics of exits at or before ``horizon`` from per-path hitting times."""
    n = int(tau.shape[0])
    hit = tau <= horizon
    k = int(hit.sum())
    lo, hi = wilson_interval(k, n)
    counts, edges = np.histogram(tau[hit], bins=bins, range=(t_start, horizon))
    return ExitStats(
        n_paths=n, n_exited=k, p_hat=k / n, ci_low=lo, ci_high=hi, horizon=float(horizon),
        histogram_counts=counts.tolist(), histogram_edges=edges.tolist(),
        mean_exit_time=float(tau[hit].mean()) if k else None, mode=mode, level=level,
    )


def _t_start(history) -> float:
    if isinstance(history, CadlagPath):
        return history.t_end
    return (history(0) if callable(history) else history[0]).t_end


def estimate_exit_probability(
    D: SmoothDomain,
    coeffs: PathCoefficients,
    history_sampler,
    config: SimConfig,
    horizons: Sequence[float] | None = None,
    threads: int = 1,
) -> list[ExitStats]:
    """Exit statistics at each horizon (default: the simulation horizon) from one ensemble.

    ``history_sampler`` is a shared history, a sequence indexed by path or a
    callable ``k -> history``; every history must end inside ``D``.
    """
    res = simulate_paths(history_sampler, coeffs, config, stop=D, threads=threads)
    t0 = _t_start(history_sampler)
    hs = list(horizons) if horizons else [config.horizon]
    return [exit_stats(res.tau, h, t0) for h in hs]


def approximating_history(D: SmoothDomain, path: CadlagPath, depth: float) -> CadlagPath:
    """Boundary path with its endpoint pushed ``depth`` into the domain along the normal."""
    xb = path.endpoint
    inner = xb + depth * D.grad_b(xb)
    vals = path.values.copy()
    vals[-1] = inner
    return CadlagPath._trusted(path.times, vals)


def estimate_closure_exit_probability(
    D: SmoothDomain,
    coeffs: PathCoefficients,
    boundary_samples: Sequence[BoundaryPathSample],
    config: SimConfig,
    depths: Sequence[float],
    threads: int = 1,
) -> list[ExitStats]:
    """Exit statistics for interior approximations of boundary histories.

    Path ``k`` starts from ``boundary_samples[k % len]`` with its endpoint
    moved inside by each of ``depths`` in turn.
    """
    out = []
    m = len(boundary_samples)
    for depth in depths:
        hists = [approximating_history(D, s.path, depth) for s in boundary_samples]

        def hist(k, hists=hists):
            return hists[k % m]

        res = simulate_paths(hist, coeffs, config, stop=D, threads=threads)
        out.append(exit_stats(res.tau, config.horizon, boundary_samples[0].t, mode="closure", level=float(depth)))
    return out


# --- barrier generator -------------------------------------------------------


def lyapunov_value(barrier: Barrier, coeffs: PathCoefficients, path: CadlagPath) -> float:
    """``|sigma^T grad g|^2 / g^2 - (grad g . mu + tr(hess g sigma sigma^T) / 2) / g``."""
    g, dg, d2g = barrier.g_derivatives(path.endpoint)
    if not g > 0:
        raise DomainError("barrier generator is undefined where g <= 0")
    mu = np.asarray(coeffs.mu(path), float)
    sig = np.asarray(coeffs.sigma(path), float)
    sg = sig.T @ dg
    Lg = dg @ mu + 0.5 * np.sum(d2g * (sig @ sig.T))
    return float(sg @ sg / (g * g) - Lg / g)


@dataclass
class LyapunovReport:
    M_hat: float
    levels: list[dict]
    divergence: bool
    n_excluded: int
    samples: list[tuple[float, float]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self, with_samples: bool = False) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("samples")
        return d


def default_interior_sampler(D: SmoothDomain, coeffs: PathCoefficients, t_hist: float = 0.5, n_steps: int = 8):
    """Histories from :func:`interior_history` whose final value is replaced by the target point."""

    def sampler(rng: np.random.Generator, endpoint: np.ndarray) -> CadlagPath:
        times, vals = interior_history(D, coeffs, rng, t_hist, n_steps, 0.01 * D.tube_width, 0.5)
        return CadlagPath(np.append(times, t_hist), np.vstack([vals, endpoint]))

    return sampler


def tube_levels(D: SmoothDomain) -> list[float]:
    return [D.tube_width / 2 ** (2 * j + 1) for j in range(4)]


def lyapunov_scan(
    D: SmoothDomain,
    barrier: Barrier,
    coeffs: PathCoefficients,
    interior_sampler: Callable | None = None,
    n: int = 200,
    seed: int = 0,
    levels: Sequence[float] | None = None,
    growth_factor: float = 10.0,
) -> LyapunovReport:
    """Sample the barrier generator at deep interior points and at fixed tube levels.

    Tube levels default to ``eps/2, eps/8, eps/32, eps/128``.  The divergence
    flag is raised when the per-level maxima grow monotonically towards the
    boundary and the last exceeds ``growth_factor * max(1, |first|)``.
    """
    sampler = interior_sampler or default_interior_sampler(D, coeffs)
    levels = list(levels) if levels is not None else tube_levels(D)
    rng_deep = path_rng(seed, 2**32)
    deep_pts = D.sample_interior(rng_deep, n, min_b=barrier.upper)
    strata: list[tuple[str, float | None, np.ndarray]] = [("deep", None, deep_pts)]
    for li, lev in enumerate(levels):
        rng = path_rng(seed, 2**32 + 1 + li)
        xb = D.sample_boundary(rng, n)
        pts = np.array([x + lev * D.grad_b(x) for x in xb])
        strata.append(("tube", float(lev), pts))
    out_levels = []
    samples = []
    excluded = 0
    for si, (kind, lev, pts) in enumerate(strata):
        vals = []
        for k, x in enumerate(pts):
            rng = path_rng(seed + 1, si * n + k)
            path = sampler(rng, x)
            if not barrier.g(x) > 0:
                excluded += 1
                continue
            v = lyapunov_value(barrier, coeffs, path)
            vals.append(v)
            samples.append((float(D.b(x)), v))
        vals = np.array(vals)
        out_levels.append({
            "kind": kind,
            "b": lev,
            "n": int(vals.size),
            "max": float(vals.max()) if vals.size else None,
            "mean": float(vals.mean()) if vals.size else None,
        })
    tube_max = [lv["max"] for lv in out_levels if lv["kind"] == "tube" and lv["max"] is not None]
    divergence = False
    if len(tube_max) >= 2:
        rising = all(b >= a for a, b in zip(tube_max, tube_max[1:]))
        divergence = rising and tube_max[-1] >= growth_factor * max(1.0, abs(tube_max[0]))
    all_vals = [v for _, v in samples]
    notes = []
    if excluded:
        notes.append(f"{excluded} samples with g <= 0 excluded")
    return LyapunovReport(
        M_hat=float(max(all_vals)) if all_vals else math.nan,
        levels=out_levels,
        divergence=bool(divergence),
        n_excluded=excluded,
        samples=samples,
        notes=notes,
    )


# --- supermartingale ---------------------------------------------------------


@dataclass
class SupermartingaleReport:
    checkpoints: list[float]
    means: list[float]
    standard_errors: list[float]
    bounds: list[float]
    slacks: list[float]
    holds: bool
    worst_slack: float
    M_used: float
    psi_start: float
    inner_index: int
    n_stopped: int

    def to_dict(self) -> dict:
        return asdict(self)


def supermartingale_check(
    D: SmoothDomain,
    barrier: Barrier,
    coeffs: PathCoefficients,
    history: CadlagPath,
    config: SimConfig,
    i: int,
    checkpoints: Sequence[float],
    M_hat: float | None = None,
    threads: int = 1,
) -> SupermartingaleReport:
    """Ensemble stopped on the inner level set ``b = 1/i``, compared at absolute checkpoint times.

    The bound uses ``M = max(M_hat, 0)``; ``M_hat`` defaults to a
    :func:`lyapunov_scan` estimate.  Slack is
    ``mean(Psi) - Psi(x0) - M (s - t)``; the check at ``s`` holds when the
    slack is at most three standard errors (plus a float guard).
    """
    Q = inner_domain(D, i)
    t0 = history.t_end
    x0 = history.endpoint
    if not float(Q.b(x0)) > 0:
        raise DomainError(f"history must end inside the level set b >= {1 / i}")
    if M_hat is None:
        M_hat = lyapunov_scan(D, barrier, coeffs, seed=config.seed).M_hat
    M = max(float(M_hat), 0.0)
    psi0 = barrier.psi(x0)
    res = simulate_paths(history, coeffs, config, stop=Q, checkpoints=checkpoints, threads=threads)
    means, ses, bounds, slacks = [], [], [], []
    ok = True
    for c, s in enumerate(checkpoints):
        psi = barrier.psi_batch(res.checkpoint_states[:, c, :])
        dev = psi - psi0
        mean_dev = float(dev.mean()) if np.all(np.isfinite(dev)) else math.inf
        se = float(dev.std(ddof=1) / math.sqrt(dev.size)) if dev.size > 1 and math.isfinite(mean_dev) else 0.0
        slack = mean_dev - M * (s - t0)
        guard = 1e-12 * (1.0 + abs(psi0))
        ok &= slack <= 3 * se + guard
        means.append(psi0 + mean_dev)
        ses.append(se)
        bounds.append(psi0 + M * (s - t0) + 3 * se)
        slacks.append(slack)
    return SupermartingaleReport(
        checkpoints=[float(s) for s in checkpoints], means=means, standard_errors=ses, bounds=bounds,
        slacks=slacks, holds=bool(ok), worst_slack=float(max(slacks)), M_used=M, psi_start=float(psi0),
        inner_index=i, n_stopped=int(res.exited.sum()),
    )


def smallest_inner_index(D: SmoothDomain, fraction: float = 0.25) -> int:
    """Smallest ``i`` with ``1/i <= fraction * tube width``."""
    return math.ceil(1.0 / (fraction * D.tube_width) - 1e-12)


# --- roundtrip ---------------------------------------------------------------


@dataclass
class RoundtripProtocol:
    boundary_times: tuple[float, ...] = (0.0, 0.5, 1.0)
    n_per_time: int = 100
    seed: int = 0
    dt: float = 1e-3
    horizons: tuple[float, ...] = (1.0, 5.0, 25.0)
    n_paths: int = 2000
    start: tuple[float, ...] | None = None
    closure_depth_fractions: tuple[float, ...] = (0.5, 0.25, 0.125)
    n_closure_paths: int = 1000
    lyapunov_n: int = 200
    inner_fraction: float = 0.25
    inner_index: int | None = None
    checkpoints: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    n_supermartingale_paths: int = 2000
    tol_generator: float = 1e-6
    tol_tangency: float | None = None
    threads: int = 1


@dataclass
class RoundtripResult:
    condition: ConditionReport
    exits: list[ExitStats]
    closure_exits: list[ExitStats]
    lyapunov: LyapunovReport
    supermartingale: SupermartingaleReport | None
    verdict: str
    diagnostics: list[str]

    @property
    def triple(self) -> tuple[str, float, bool]:
        return self.condition.verdict, self.exits[-1].p_hat, not self.lyapunov.divergence

    def to_dict(self) -> dict:
        return {
            "condition_ii": self.condition.to_dict(),
            "exit": {"interior": [e.to_dict() for e in self.exits],
                     "closure": [e.to_dict() for e in self.closure_exits]},
            "lyapunov": {**self.lyapunov.to_dict(),
                         "supermartingale": None if self.supermartingale is None else self.supermartingale.to_dict()},
            "verdict": self.verdict,
            "diagnostics": self.diagnostics,
        }


def default_start(D: SmoothDomain, seed: int) -> np.ndarray:
    """Halfway between the interior reference point and a random boundary point."""
    c = D.interior_point()
    xb = D.sample_boundary(path_rng(seed, 2**33), 1)[0]
    return c + 0.5 * (xb - c)


def theorem_roundtrip(D: SmoothDomain, coeffs: PathCoefficients, protocol: RoundtripProtocol | None = None) -> RoundtripResult:
    """Run every check and compare their answers.

    CONSISTENT when everything points to viability (boundary check passes
    outside the borderline band, no exits, bounded barrier generator,
    supermartingale bound holds) or everything points away from it (check
    fails, the exit lower confidence bound is positive, the barrier
    generator diverges).  Anything else is INCONCLUSIVE.
    """
    p = protocol or RoundtripProtocol()
    diag: list[str] = []
    cond = check_condition_ii(D, coeffs, p.boundary_times, p.n_per_time, p.tol_tangency, p.tol_generator, p.seed)
    start = np.asarray(p.start, float) if p.start is not None else default_start(D, p.seed)
    history = CadlagPath.constant(start)
    horizon = max(p.horizons)
    cfg = SimConfig(dt=p.dt, horizon=horizon, seed=p.seed, n_paths=p.n_paths)
    exits = estimate_exit_probability(D, coeffs, history, cfg, p.horizons, p.threads)
    bsamples = sample_boundary_paths(D, coeffs, 0.0, min(p.n_per_time, p.n_closure_paths), p.seed + 1)
    ccfg = SimConfig(dt=p.dt, horizon=horizon, seed=p.seed + 2, n_paths=p.n_closure_paths)
    depths = [f * D.tube_width for f in p.closure_depth_fractions]
    closure = estimate_closure_exit_probability(D, coeffs, bsamples, ccfg, depths, p.threads)
    barrier = Barrier(D)
    lyap = lyapunov_scan(D, barrier, coeffs, n=p.lyapunov_n, seed=p.seed)
    sm = None
    i = p.inner_index or smallest_inner_index(D, p.inner_fraction)
    if float(D.b(start)) > 1.0 / i:
        scfg = SimConfig(dt=p.dt, horizon=max(p.checkpoints), seed=p.seed + 3, n_paths=p.n_supermartingale_paths)
        sm = supermartingale_check(D, barrier, coeffs, history, scfg, i, p.checkpoints, lyap.M_hat, p.threads)
    else:
        diag.append(f"start has b = {float(D.b(start)):.4g} below the inner level 1/{i}; supermartingale check skipped")

    no_exits = all(e.n_exited == 0 for e in exits) and all(e.n_exited == 0 for e in closure)
    exit_evidence = exits[-1].ci_low > 0 or any(e.ci_low > 0 for e in closure)
    if cond.passed and cond.borderline:
        diag.append(f"worst generator value {cond.worst_generator:.3g} lies in the borderline band "
                    f"+-{10 * cond.tol_generator:.1g}")
    if cond.passed and not cond.borderline and no_exits and not lyap.divergence and (sm is None or sm.holds):
        verdict = CONSISTENT
    elif not cond.passed and exit_evidence and lyap.divergence:
        verdict = CONSISTENT
    else:
        verdict = INCONCLUSIVE
        if cond.passed and not no_exits:
            diag.append("boundary check passed but exits were observed")
        if not cond.passed and not exit_evidence:
            diag.append("boundary check failed but no exits were observed at this horizon and resolution")
        if cond.passed and lyap.divergence:
            diag.append("boundary check passed but the barrier generator grows towards the boundary")
        if not cond.passed and not lyap.divergence:
            diag.append("boundary check failed but the barrier generator stayed bounded on the sampled levels")
        if sm is not None and not sm.holds and cond.passed:
            diag.append(f"supermartingale bound violated, worst slack {sm.worst_slack:.3g}")
    if verdict == CONSISTENT and no_exits:
        diag.append("no exits observed; finite horizons and samples support but do not prove viability")
    return RoundtripResult(cond, exits, closure, lyap, sm, verdict, diag)
