"""Non-anticipative functionals and their pathwise (Dupire) derivatives.

Derivatives are finite differences built from the two path perturbations:
flat time extension for the horizontal derivative (one-sided, with
Richardson extrapolation) and endpoint bumps for the vertical gradient and
Hessian (central).  Bumps use the *realised* step ``fl(x + h) - x`` so that
functionals affine in the endpoint are differentiated exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .paths import (
    CadlagPath,
    PathPair,
    restrict_to_index,
    sup_norm,
    with_endpoint,
)

if TYPE_CHECKING:
    from .domains import Barrier, SmoothDomain
    from .sde import PathCoefficients, Trajectory


class NumericError(ArithmeticError):
    """A finite-difference evaluation produced a non-finite value."""


class ContractError(ValueError):
    """An input does not carry what the operation requires."""


@dataclass(frozen=True)
class PathFunctional:
    """``F_t(x_t, v_t)`` evaluated on pairs already restricted to ``[0, t]``.

    ``func`` receives a :class:`PathPair` whose ``t_end`` is the evaluation
    time.  Passing ``t`` to :meth:`__call__` restricts first, which is how
    non-anticipativity is enforced.
    """

    func: Callable[[PathPair], float]
    name: str = "functional"
    predictable_in_v: bool = True

    def __call__(self, pair: PathPair, t: float | None = None) -> float:
        if t is not None and t != pair.t_end:
            pair = pair.restrict(t)
        return float(self.func(pair))


def is_predictable(F: PathFunctional, pair: PathPair, tol: float = 1e-12) -> bool:
    """Check ``F_t(x, v) == F_t(x, v_{t-})`` by direct substitution."""
    v_minus = with_endpoint(pair.v, pair.v.left_limit_at(pair.t_end))
    return abs(F(pair) - F(PathPair._trusted(pair.x, v_minus))) <= tol


@dataclass(frozen=True)
class FdScheme:
    """Finite-difference steps.  ``None`` bumps scale with ``1 + sup_norm(x)``."""

    bump_size: float | None = None
    hessian_bump: float | None = None
    h_min: float = 1e-4
    h_max: float = 1e-2
    richardson_levels: int = 2

    def __post_init__(self):
        if not (0 < self.h_min <= self.h_max):
            raise ValueError("need 0 < h_min <= h_max")
        if self.bump_size is not None and self.bump_size <= 0:
            raise ValueError("bump_size must be positive")
        if self.hessian_bump is not None and self.hessian_bump <= 0:
            raise ValueError("hessian_bump must be positive")
        if self.richardson_levels < 1:
            raise ValueError("richardson_levels must be >= 1")

    def bumps(self, x: CadlagPath) -> tuple[float, float]:
        scale = 1.0 + sup_norm(x)
        h1 = self.bump_size if self.bump_size is not None else 1e-5 * scale
        h2 = self.hessian_bump if self.hessian_bump is not None else 1e-4 * scale
        return h1, h2

    def horizontal_steps(self) -> np.ndarray:
        # doubling from h_min keeps the extrapolation residual O(h_min^2);
        # the ratio shrinks when the doublings would overshoot h_max
        L = self.richardson_levels
        if L == 1:
            return np.array([self.h_min])
        ratio = min(2.0, (self.h_max / self.h_min) ** (1.0 / (L - 1)))
        if ratio <= 1.0:
            return np.array([self.h_min])
        return self.h_min * ratio ** np.arange(L - 1, -1, -1.0)


DEFAULT_SCHEME = FdScheme()


@dataclass(frozen=True)
class DerivativeBundle:
    horizontal: float
    gradient: np.ndarray
    hessian: np.ndarray
    asymmetry: float = 0.0


def _finite(value: float, what: str, step: float) -> float:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite (step {step:g})")
    return value


def horizontal_derivative(
    F: PathFunctional, pair: PathPair, scheme: FdScheme = DEFAULT_SCHEME, f0: float | None = None
) -> float:
    """One-sided difference quotient under flat extension, Richardson-extrapolated."""
    if f0 is None:
        f0 = F(pair)
    steps = scheme.horizontal_steps()
    table = []
    for h in steps:
        q = (F(pair.extend(float(h))) - f0) / h
        table.append(_finite(q, "horizontal difference quotient", h))
    # Neville tableau for an error expansion in powers of h
    for k in range(1, len(table)):
        new = []
        for j in range(k, len(table)):
            ratio = steps[j - k] / steps[j]
            new.append(table[j] + (table[j] - table[j - 1]) / (ratio - 1.0))
        table = table[:k] + new
    return _finite(table[-1], "horizontal derivative", steps[-1])


def _bumped(pair: PathPair, x_end: np.ndarray) -> PathPair:
    return PathPair._trusted(with_endpoint(pair.x, x_end), pair.v)


def vertical_gradient(
    F: PathFunctional, pair: PathPair, scheme: FdScheme = DEFAULT_SCHEME
) -> np.ndarray:
    h, _ = scheme.bumps(pair.x)
    x0 = np.array(pair.x.endpoint)
    n = x0.shape[0]
    grad = np.empty(n)
    for i in range(n):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] = x0[i] + h
        xm[i] = x0[i] - h
        grad[i] = (F(_bumped(pair, xp)) - F(_bumped(pair, xm))) / (xp[i] - xm[i])
        _finite(grad[i], f"vertical derivative {i}", h)
    return grad


def vertical_hessian(
    F: PathFunctional,
    pair: PathPair,
    scheme: FdScheme = DEFAULT_SCHEME,
    f0: float | None = None,
) -> np.ndarray:
    _, h = scheme.bumps(pair.x)
    if f0 is None:
        f0 = F(pair)
    x0 = np.array(pair.x.endpoint)
    n = x0.shape[0]
    up = x0 + h
    dn = x0 - h
    hp = up - x0
    hm = x0 - dn
    H = np.empty((n, n))
    for i in range(n):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] = up[i]
        xm[i] = dn[i]
        fp = F(_bumped(pair, xp))
        fm = F(_bumped(pair, xm))
        H[i, i] = 2.0 * ((fp - f0) / hp[i] - (f0 - fm) / hm[i]) / (hp[i] + hm[i])
        _finite(H[i, i], f"vertical second derivative ({i},{i})", h)
    for i in range(n):
        for j in range(i + 1, n):
            vals = []
            for si, sj in ((up, up), (up, dn), (dn, up), (dn, dn)):
                y = x0.copy()
                y[i] = si[i]
                y[j] = sj[j]
                vals.append(F(_bumped(pair, y)))
            H[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (
                (up[i] - dn[i]) * (up[j] - dn[j])
            )
            _finite(H[i, j], f"vertical second derivative ({i},{j})", h)
            H[j, i] = H[i, j]
    return H


def derivatives(
    F: PathFunctional, pair: PathPair, scheme: FdScheme = DEFAULT_SCHEME
) -> DerivativeBundle:
    f0 = F(pair)
    return DerivativeBundle(
        horizontal=horizontal_derivative(F, pair, scheme, f0=f0),
        gradient=vertical_gradient(F, pair, scheme),
        hessian=vertical_hessian(F, pair, scheme, f0=f0),
    )


def generator_apply(
    F: PathFunctional,
    x_path: CadlagPath,
    coeffs: "PathCoefficients",
    scheme: FdScheme = DEFAULT_SCHEME,
) -> float:
    """Horizontal derivative + drift term + half trace against ``sigma sigma^T``.

    The second path handed to ``F`` is the quadratic-variation density
    ``r -> sigma(x_r) sigma(x_r)^T`` along ``x_path``.
    """
    v = coeffs.qv_density_path(x_path)
    pair = PathPair._trusted(x_path, v)
    d = derivatives(F, pair, scheme)
    n = x_path.dim
    A = v.endpoint.reshape(n, n)
    mu = coeffs.mu(x_path)
    return float(d.horizontal + d.gradient @ mu + 0.5 * np.sum(d.hessian * A))


def ito_residual(
    F: PathFunctional,
    trajectory: "Trajectory",
    coeffs: "PathCoefficients | None" = None,
    scheme: FdScheme = DEFAULT_SCHEME,
) -> float:
    """``F(X_s, A_s) - F(X_t, A_t)`` minus left-point sums of the Itô expansion.

    All three integrals are left-point sums over the simulation grid and
    the whole expression is accumulated with ``math.fsum`` so that, for
    endpoint-affine ``F``, the telescoping cancels exactly.  ``coeffs`` is
    accepted for symmetry with :func:`generator_apply`; the density path is
    read from the trajectory.
    """
    if trajectory.brownian_increments is None:
        raise ContractError("trajectory was simulated without retained Brownian increments")
    X = trajectory.path
    A = trajectory.qv_density
    n = X.dim
    k0 = trajectory.start_index
    N = len(X) - 1
    terms: list[float] = []
    pair_end = PathPair._trusted(X, A)
    pair_start = PathPair._trusted(restrict_to_index(X, k0), restrict_to_index(A, k0))
    terms.append(F(pair_end))
    terms.append(-F(pair_start))
    times = X.times
    values = X.values
    for k in range(k0, N):
        pair = PathPair._trusted(restrict_to_index(X, k), restrict_to_index(A, k))
        d = derivatives(F, pair, scheme)
        du = times[k + 1] - times[k]
        Ak = A.values[k].reshape(n, n)
        terms.append(-d.horizontal * du)
        terms.append(-0.5 * float(np.sum(d.hessian * Ak)) * du)
        for i in range(n):
            gi = d.gradient[i]
            terms.append(-gi * values[k + 1, i])
            terms.append(gi * values[k, i])
    return math.fsum(terms)


# --- catalog -----------------------------------------------------------------


def _step_integral(x: CadlagPath) -> np.ndarray:
    # sum_k x(t_k) (t_{k+1} - t_k): left values, so the final instant never counts
    if len(x) == 1:
        return np.zeros(x.dim)
    return np.diff(x.times) @ x.values[:-1]


def endpoint_affine(a, b: float = 0.0) -> PathFunctional:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return PathFunctional(lambda p: a @ p.x.endpoint + b, name="endpoint_affine")


def endpoint_quadratic(Q=None) -> PathFunctional:
    if Q is None:
        return PathFunctional(lambda p: float(p.x.endpoint @ p.x.endpoint), name="endpoint_quadratic")
    Q = np.asarray(Q, dtype=float)
    return PathFunctional(lambda p: float(p.x.endpoint @ Q @ p.x.endpoint), name="endpoint_quadratic")


def endpoint_function(f: Callable[[float, np.ndarray], float], name: str = "endpoint_function") -> PathFunctional:
    """``F_t(x, v) = f(t, x(t))``."""
    return PathFunctional(lambda p: f(p.t_end, p.x.endpoint), name=name)


def path_integral(a=None) -> PathFunctional:
    """``a . int_0^t x(s) ds`` with the exact step-path integral."""

    def func(p: PathPair) -> float:
        I = _step_integral(p.x)
        return float(I.sum() if a is None else np.asarray(a, dtype=float) @ I)

    return PathFunctional(func, name="path_integral")


def running_sup() -> PathFunctional:
    """``sup_{s < t} |x(s)|``; zero on the degenerate interval ``[0, 0]``."""

    def func(p: PathPair) -> float:
        if len(p.x) == 1:
            return 0.0
        return float(np.max(np.linalg.norm(p.x.values[:-1], axis=1)))

    return PathFunctional(func, name="running_sup")


def neg_oriented_distance(domain: "SmoothDomain") -> PathFunctional:
    return PathFunctional(lambda p: -float(domain.b(p.x.endpoint)), name="neg_oriented_distance")


def psi_barrier(barrier: "Barrier") -> PathFunctional:
    return PathFunctional(lambda p: barrier.psi(p.x.endpoint), name="psi_barrier")


def qv_weighted_endpoint(a) -> PathFunctional:
    """``a . x(t)`` scaled by ``1 + tr v(t-)``; predictable in ``v`` by construction."""
    a = np.atleast_1d(np.asarray(a, dtype=float))

    def func(p: PathPair) -> float:
        n = p.x.dim
        vm = p.v.left_limit_at(p.t_end).reshape(n, n)
        return float((1.0 + np.trace(vm)) * (a @ p.x.endpoint))

    return PathFunctional(func, name="qv_weighted_endpoint")


FUNCTIONAL_CATALOG: dict[str, Callable[..., PathFunctional]] = {
    "endpoint_affine": endpoint_affine,
    "endpoint_quadratic": endpoint_quadratic,
    "path_integral": path_integral,
    "running_sup": running_sup,
    "neg_oriented_distance": neg_oriented_distance,
    "psi_barrier": psi_barrier,
}


# --- residual ladder ---------------------------------------------------------


@dataclass(frozen=True)
class LadderRung:
    dt: float
    rms: float
    se: float
    mean_abs: float
    max_abs: float
    residuals: tuple[float, ...] = field(repr=False, default=())


def residual_ladder(
    F: PathFunctional,
    coeffs: "PathCoefficients",
    history: CadlagPath,
    dts,
    n_seeds: int,
    horizon: float,
    seed: int = 0,
    scheme: FdScheme = DEFAULT_SCHEME,
) -> list[LadderRung]:
    """Itô residuals over a dt ladder with Brownian increments coupled across rungs.

    Every ``dt`` must be an integer multiple of the smallest.  Seed batch
    member ``k`` draws its fine increments from the ``(seed, k)`` stream.
    The standard error of the RMS is the delta-method value
    ``se(mean r^2) / (2 rms)``.
    """
    from .sde import SimConfig, coupled_increments, simulate

    dts = [float(d) for d in dts]
    fine = min(dts)
    span = horizon - history.t_end
    n_fine = round(span / fine)
    if abs(n_fine * fine - span) > 1e-9 * span:
        raise ContractError(f"smallest dt {fine} does not divide the span {span}")
    factors = []
    for d in dts:
        f = round(d / fine)
        if abs(f * fine - d) > 1e-12 * d or n_fine % f:
            raise ContractError(f"dt {d} is not a divisor-compatible multiple of {fine}")
        factors.append(f)
    out = []
    for d, f in zip(dts, factors):
        res = []
        cfg = SimConfig(dt=d, horizon=horizon, seed=seed, store_increments=True)
        for k in range(n_seeds):
            inc = coupled_increments(seed, k, fine, n_fine, coeffs.brownian_dim, f)
            traj = simulate(history, coeffs, cfg, path_index=k, increments=inc)
            res.append(ito_residual(F, traj, scheme=scheme))
        r = np.array(res)
        r2 = r * r
        rms = float(math.sqrt(r2.mean()))
        se_r2 = float(r2.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
        se = se_r2 / (2 * rms) if rms > 0 else 0.0
        out.append(LadderRung(d, rms, se, float(np.abs(r).mean()), float(np.abs(r).max()), tuple(res)))
    return out


def ladder_decreasing(rungs: list[LadderRung], n_se: float = 2.0) -> bool:
    """Each rung's RMS is no larger than the previous one plus ``n_se`` standard errors."""
    return all(b.rms <= a.rms + n_se * a.se for a, b in zip(rungs, rungs[1:]))
