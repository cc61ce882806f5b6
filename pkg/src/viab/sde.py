"""Seeded Euler–Maruyama for SDEs whose coefficients read the whole past path.

Coefficients are maps from a :class:`~viab.paths.CadlagPath` (the path up to
the current instant) to a drift vector and a diffusion matrix.  Catalog
coefficients additionally expose a vectorised route that reads a streaming
:class:`PathSummary` (current time, endpoint, step integral, sup norm), which
is what the ensemble kernel uses.  Arbitrary user coefficients fall back to
the exact path route one path at a time.

Randomness is counter based: path ``k`` of a run with seed ``s`` draws its
standard normals, step after step, from ``Philox(key=[s, k])``.  Paths are
therefore independent of execution order, of the block they land in and of
the number of worker threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np

from .paths import CadlagPath, PathDomainError, sup_distance, sup_norm

_CHUNK_STEPS = 256


class SimulationError(ArithmeticError):
    """Non-finite state during integration."""

    def __init__(self, message: str, step_index: int, path_index: int = 0):
        super().__init__(f"{message} (path {path_index}, step {step_index})")
        self.step_index = step_index
        self.path_index = path_index


class EnsembleError(ArithmeticError):
    def __init__(self, failures: list[tuple[int, int]]):
        shown = ", ".join(f"path {p} at step {s}" for p, s in failures[:10])
        more = "" if len(failures) <= 10 else f" and {len(failures) - 10} more"
        super().__init__(f"{len(failures)} paths blew up: {shown}{more}")
        self.failures = failures


class HittingPreconditionError(ValueError):
    """The trajectory does not start strictly inside the domain."""


# --- streaming summaries -----------------------------------------------------


def _step_integral(p: CadlagPath) -> np.ndarray:
    if len(p) == 1:
        return np.zeros(p.dim)
    return np.diff(p.times) @ p.values[:-1]


@dataclass
class PathSummary:
    """Per-path statistics of a batch of paths sharing one time grid.

    ``x`` is ``(B, n)``, ``integral`` is the step-function integral
    ``(B, n)`` and ``sup`` the running sup of ``|x|`` including the endpoint.
    """

    t: float
    x: np.ndarray
    integral: np.ndarray
    sup: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[CadlagPath]) -> "PathSummary":
        t = paths[0].t_end
        for p in paths:
            if p.t_end != t:
                raise PathDomainError("histories in one batch must share their final time")
        return cls(
            t=t,
            x=np.array([p.endpoint for p in paths]),
            integral=np.array([_step_integral(p) for p in paths]),
            sup=np.array([sup_norm(p) for p in paths]),
        )

    def advance(self, x_new: np.ndarray, t_new: float) -> None:
        self.integral = self.integral + self.x * (t_new - self.t)
        self.x = x_new
        self.sup = np.maximum(self.sup, np.linalg.norm(x_new, axis=1))
        self.t = t_new

    def subset(self, keep: np.ndarray) -> None:
        self.x = self.x[keep]
        self.integral = self.integral[keep]
        self.sup = self.sup[keep]


# --- coefficients ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientTerm:
    """One catalog entry: exact route, batch route and declared constants."""

    name: str
    params: dict
    exact: Callable[[CadlagPath], np.ndarray]
    batch: Callable[[PathSummary], np.ndarray] | None
    lipschitz: float
    growth: float


def _rot90(x: np.ndarray) -> np.ndarray:
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


def _require_2d(name: str, dim: int) -> None:
    if dim != 2:
        raise ValueError(f"{name} is defined for 2-D states, got dimension {dim}")


def zero_drift(dim: int) -> CoefficientTerm:
    return CoefficientTerm(
        "zero_drift", {}, lambda p: np.zeros(dim), lambda s: np.zeros_like(s.x), 0.0, 0.0
    )


def constant_drift(dim: int, m) -> CoefficientTerm:
    m = np.broadcast_to(np.asarray(m, dtype=float), (dim,)).copy()
    return CoefficientTerm(
        "constant_drift",
        {"m": m.tolist()},
        lambda p: m.copy(),
        lambda s: np.broadcast_to(m, s.x.shape).copy(),
        0.0,
        float(np.linalg.norm(m)),
    )


def linear_drift(dim: int, lam: float) -> CoefficientTerm:
    lam = float(lam)
    return CoefficientTerm(
        "linear_drift",
        {"lambda": lam},
        lambda p: -lam * p.endpoint,
        lambda s: -lam * s.x,
        abs(lam),
        abs(lam),
    )


def running_avg_drift(dim: int, lam: float) -> CoefficientTerm:
    """``-lam`` times the time average of the past path; ``-lam x(0)`` at time 0."""
    lam = float(lam)

    def exact(p: CadlagPath) -> np.ndarray:
        if p.t_end == 0.0:
            return -lam * p.values[0]
        return -lam * _step_integral(p) / p.t_end

    def batch(s: PathSummary) -> np.ndarray:
        if s.t == 0.0:
            return -lam * s.x
        return -lam * s.integral / s.t

    return CoefficientTerm("running_avg_drift", {"lambda": lam}, exact, batch, abs(lam), abs(lam))


def zero_sigma(dim: int, d: int = 1) -> CoefficientTerm:
    return CoefficientTerm(
        "zero_sigma",
        {},
        lambda p: np.zeros((dim, d)),
        lambda s: np.zeros((s.x.shape[0], dim, d)),
        0.0,
        0.0,
    )


def iso_sigma(dim: int, c: float) -> CoefficientTerm:
    c = float(c)
    eye = c * np.eye(dim)
    return CoefficientTerm(
        "iso_sigma",
        {"c": c},
        lambda p: eye.copy(),
        lambda s: np.broadcast_to(eye, (s.x.shape[0], dim, dim)).copy(),
        0.0,
        abs(c) * math.sqrt(dim),
    )


def rot_tangent_sigma(dim: int, c: float) -> CoefficientTerm:
    """``c * rot90(x(t))`` as a 2x1 matrix: tangent to every centred circle."""
    _require_2d("rot_tangent_sigma", dim)
    c = float(c)
    return CoefficientTerm(
        "rot_tangent_sigma",
        {"c": c},
        lambda p: c * _rot90(p.endpoint)[:, None],
        lambda s: c * _rot90(s.x)[:, :, None],
        abs(c),
        abs(c),
    )


def path_scaled_rot_sigma(dim: int, c: float) -> CoefficientTerm:
    """``c (1 + min(1, sup|x|)) rot90(x(t))``.

    Lipschitz in the sup distance with constant ``3|c|``: write the
    difference around the path with the smaller sup, whose endpoint then
    has norm below one whenever the two scale factors differ.
    """
    _require_2d("path_scaled_rot_sigma", dim)
    c = float(c)

    def exact(p: CadlagPath) -> np.ndarray:
        scale = c * (1.0 + min(1.0, sup_norm(p)))
        return scale * _rot90(p.endpoint)[:, None]

    def batch(s: PathSummary) -> np.ndarray:
        scale = c * (1.0 + np.minimum(1.0, s.sup))
        return (scale[:, None] * _rot90(s.x))[:, :, None]

    return CoefficientTerm("path_scaled_rot_sigma", {"c": c}, exact, batch, 3 * abs(c), 2 * abs(c))


DRIFT_CATALOG: dict[str, tuple[Callable[..., CoefficientTerm], tuple[str, ...]]] = {
    "zero_drift": (zero_drift, ()),
    "constant_drift": (constant_drift, ("m",)),
    "linear_drift": (linear_drift, ("lambda",)),
    "running_avg_drift": (running_avg_drift, ("lambda",)),
}

SIGMA_CATALOG: dict[str, tuple[Callable[..., CoefficientTerm], tuple[str, ...]]] = {
    "zero_sigma": (zero_sigma, ()),
    "iso_sigma": (iso_sigma, ("c",)),
    "rot_tangent_sigma": (rot_tangent_sigma, ("c",)),
    "path_scaled_rot_sigma": (path_scaled_rot_sigma, ("c",)),
}


@dataclass(frozen=True, eq=False)
class PathCoefficients:
    """Drift ``mu(path) -> R^n`` and diffusion ``sigma(path) -> R^{n x d}``.

    ``mu_batch`` / ``sigma_batch`` are optional vectorised routes over a
    :class:`PathSummary`; they must agree with the exact routes.
    """

    mu: Callable[[CadlagPath], np.ndarray]
    sigma: Callable[[CadlagPath], np.ndarray]
    dim: int
    brownian_dim: int
    declared_lipschitz: float = math.inf
    declared_growth: float = math.inf
    mu_batch: Callable[[PathSummary], np.ndarray] | None = None
    sigma_batch: Callable[[PathSummary], np.ndarray] | None = None
    name: str = "custom"

    @property
    def vectorised(self) -> bool:
        return self.mu_batch is not None and self.sigma_batch is not None

    def qv_density(self, path: CadlagPath) -> np.ndarray:
        s = np.asarray(self.sigma(path), dtype=float)
        return s @ s.T

    def qv_density_path(self, path: CadlagPath) -> CadlagPath:
        """``r -> sigma(x_r) sigma(x_r)^T`` on the grid of ``path``, flattened."""
        vals = np.empty((len(path), self.dim * self.dim))
        for k in range(len(path)):
            sub = CadlagPath._trusted(path.times[: k + 1], path.values[: k + 1])
            vals[k] = self.qv_density(sub).reshape(-1)
        return CadlagPath._trusted(path.times, vals)


def combine(drift: CoefficientTerm, diffusion: CoefficientTerm, dim: int) -> PathCoefficients:
    d = int(np.asarray(diffusion.exact(CadlagPath.constant(np.zeros(dim)))).shape[1])
    return PathCoefficients(
        mu=drift.exact,
        sigma=diffusion.exact,
        dim=dim,
        brownian_dim=d,
        declared_lipschitz=drift.lipschitz + diffusion.lipschitz,
        declared_growth=drift.growth + diffusion.growth,
        mu_batch=drift.batch,
        sigma_batch=diffusion.batch,
        name=f"{drift.name}+{diffusion.name}",
    )


def _build_term(catalog, spec, what: str, dim: int) -> CoefficientTerm:
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in catalog:
        raise KeyError(f"unknown {what} {name!r}; known: {', '.join(sorted(catalog))}")
    factory, required = catalog[name]
    missing = [k for k in required if k not in spec]
    if missing:
        raise KeyError(f"{what} {name!r} needs parameter(s) {', '.join(missing)}")
    extra = set(spec) - set(required)
    if extra:
        raise KeyError(f"{what} {name!r} does not take {', '.join(sorted(extra))}")
    return factory(dim, *(spec[k] for k in required))


def coefficients_from_spec(drift, sigma, dim: int = 2) -> PathCoefficients:
    """Build coefficients from catalog entries such as ``{"name": "linear_drift", "lambda": 1}``."""
    return combine(_build_term(DRIFT_CATALOG, drift, "drift", dim), _build_term(SIGMA_CATALOG, sigma, "sigma", dim), dim)


# --- simulation --------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    seed: int = 0
    n_paths: int = 1
    store_increments: bool = True
    block_size: int = 1024

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def grid(self, t_start: float) -> np.ndarray:
        """Simulation instants after ``t_start``; the last one is the horizon."""
        if self.dt > self.horizon - t_start:
            raise ValueError(
                f"dt={self.dt} exceeds the simulated span [{t_start}, {self.horizon}]"
            )
        n = math.ceil((self.horizon - t_start) / self.dt - 1e-9)
        g = t_start + self.dt * np.arange(1, n + 1)
        g[-1] = self.horizon
        return g


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, path_index], dtype=np.uint64)))


def standard_normals(seed: int, path_index: int, n_steps: int, d: int) -> np.ndarray:
    """The full per-step normal stream of one path, shape ``(n_steps, d)``."""
    return path_rng(seed, path_index).standard_normal((n_steps, d))


def coupled_increments(seed: int, path_index: int, dt_fine: float, n_fine: int, d: int, factor: int) -> np.ndarray:
    """Brownian increments on the grid ``factor * dt_fine`` built from the fine stream.

    Summing ``factor`` consecutive fine increments couples a dt ladder to one
    Brownian path.
    """
    if n_fine % factor:
        raise ValueError(f"{n_fine} fine steps do not split into groups of {factor}")
    dw = math.sqrt(dt_fine) * standard_normals(seed, path_index, n_fine, d)
    return dw.reshape(n_fine // factor, factor, d).sum(axis=1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    path: CadlagPath
    start_time: float
    start_index: int
    brownian_increments: np.ndarray | None
    qv_density: CadlagPath
    path_index: int = 0


@dataclass(frozen=True, eq=False)
class HittingResult:
    tau: float
    tau_refined: float
    exit_point: np.ndarray | None
    exited: bool


@dataclass(eq=False)
class EnsembleResult:
    """Per-path outcomes of a streamed (unrecorded) ensemble run."""

    final: np.ndarray
    exited: np.ndarray
    tau: np.ndarray
    tau_refined: np.ndarray
    exit_point: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_states: np.ndarray
    start_b: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.final.shape[0]


def _checkpoint_indices(times: np.ndarray, t0: float, checkpoints: Sequence[float]) -> np.ndarray:
    full = np.concatenate([[t0], times])
    idx = []
    for s in checkpoints:
        k = int(np.argmin(np.abs(full - s)))
        if abs(full[k] - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"checkpoint {s} is not on the simulation grid")
        idx.append(k)
    return np.array(idx, dtype=int)


@dataclass(eq=False)
class _Block:
    indices: np.ndarray
    histories: list[CadlagPath]


def _block_normals(rngs: list[np.random.Generator], n: int, d: int) -> np.ndarray:
    # (B, n, d); each path consumes its own stream sequentially
    return np.stack([g.standard_normal((n, d)) for g in rngs])


def _run_block(
    block: _Block,
    coeffs: PathCoefficients,
    config: SimConfig,
    times: np.ndarray,
    stop=None,
    checkpoint_idx: np.ndarray | None = None,
    record: bool = False,
    increments: np.ndarray | None = None,
):
    # Vectorised over the block.  Stopped or failed paths are dropped from
    # the working arrays, so the arithmetic on each surviving path is the
    # same no matter which other paths share its block.
    summary = PathSummary.from_paths(block.histories)
    B, n = summary.x.shape
    d = coeffs.brownian_dim
    N = times.shape[0]
    rngs = None if increments is not None else [path_rng(config.seed, int(k)) for k in block.indices]
    X = summary.x.copy()
    live = np.arange(B)
    final = X.copy()
    failed = np.full(B, -1, dtype=int)
    exited = np.zeros(B, dtype=bool)
    tau = np.full(B, math.inf)
    tau_ref = np.full(B, math.inf)
    exit_pt = np.full((B, n), np.nan)
    cps = checkpoint_idx if checkpoint_idx is not None else np.zeros(0, dtype=int)
    cp_states = np.full((B, cps.shape[0], n), np.nan)
    cp_states[:, cps == 0] = X[:, None, :]
    b_old = None
    start_b = None
    if stop is not None:
        b_old = np.asarray(stop.b(X), dtype=float).reshape(B)
        start_b = b_old.copy()
    if record:
        rec_x = np.empty((B, N + 1, n))
        rec_x[:, 0] = X
        rec_a = np.empty((B, N + 1, n * n))
        rec_dw = np.empty((B, N, d)) if config.store_increments else None
    t_prev = summary.t
    Z = None
    for k in range(N):
        j = k % _CHUNK_STEPS
        if increments is None and j == 0:
            m = min(_CHUNK_STEPS, N - k)
            Z = np.stack([rngs[i].standard_normal((m, d)) for i in live])
        t_new = times[k]
        du = t_new - t_prev
        dW = increments[live, k, :] if increments is not None else math.sqrt(du) * Z[:, j, :]
        mu = coeffs.mu_batch(summary)
        sig = coeffs.sigma_batch(summary)
        if record:
            rec_a[live, k] = np.einsum("bij,bkj->bik", sig, sig).reshape(-1, n * n)
            if rec_dw is not None:
                rec_dw[live, k] = dW
        X_new = X + mu * du
        for col in range(d):
            X_new = X_new + sig[:, :, col] * dW[:, col, None]
        bad = ~np.all(np.isfinite(X_new), axis=1)
        X_new[bad] = X[bad]
        drop = bad.copy()
        if bad.any():
            failed[live[bad]] = k
        summary.advance(X_new, t_new)
        X = X_new
        if stop is not None:
            b_new = np.asarray(stop.b(X), dtype=float).reshape(-1)
            hit = ~bad & (b_new <= 0)
            if hit.any():
                ids = live[hit]
                exited[ids] = True
                tau[ids] = t_new
                tau_ref[ids] = t_prev + du * (b_old[hit] / (b_old[hit] - b_new[hit]))
                exit_pt[ids] = X[hit]
                drop |= hit
            b_old = b_new
        if record:
            rec_x[live, k + 1] = X
        if cps.shape[0]:
            cp_states[np.ix_(live, cps == k + 1)] = X[:, None, :]
        if drop.any():
            ids = live[drop]
            final[ids] = X[drop]
            later = cps > k + 1
            if later.any():
                cp_states[np.ix_(ids, later)] = X[drop][:, None, :]
            keep = ~drop
            live = live[keep]
            X = X[keep]
            summary.subset(keep)
            if Z is not None:
                Z = Z[keep]
            if b_old is not None:
                b_old = b_old[keep]
            if live.size == 0:
                break
        t_prev = t_new
    final[live] = X
    out = dict(
        indices=block.indices, final=final, exited=exited, tau=tau, tau_refined=tau_ref,
        exit_point=exit_pt, checkpoint_states=cp_states, failed=failed, start_b=start_b,
        rec_x=None, rec_a=None, rec_dw=None,
    )
    if record:
        sig = coeffs.sigma_batch(summary)
        rec_a[live, N] = np.einsum("bij,bkj->bik", sig, sig).reshape(-1, n * n)
        out.update(rec_x=rec_x, rec_a=rec_a, rec_dw=rec_dw)
    return out


def _run_block_exact(
    block: _Block,
    coeffs: PathCoefficients,
    config: SimConfig,
    times: np.ndarray,
    stop=None,
    checkpoint_idx=None,
    record: bool = False,
    increments: np.ndarray | None = None,
):
    # Path-by-path route for coefficients without a batch form.
    results = []
    for b, (k_path, hist) in enumerate(zip(block.indices, block.histories)):
        inc = None if increments is None else increments[b : b + 1]
        results.append(_simulate_exact_one(hist, coeffs, config, times, int(k_path), stop, checkpoint_idx, record, inc))
    keys = results[0].keys()
    out = {}
    for key in keys:
        vals = [r[key] for r in results]
        out[key] = None if vals[0] is None else np.concatenate(vals, axis=0)
    out["indices"] = block.indices
    return out


def _simulate_exact_one(hist, coeffs, config, times, k_path, stop, checkpoint_idx, record, inc):
    n = hist.dim
    d = coeffs.brownian_dim
    N = times.shape[0]
    h = len(hist)
    all_t = np.concatenate([hist.times, times])
    all_x = np.empty((h + N, n))
    all_x[:h] = hist.values
    a = np.empty((h + N, n * n))
    Z = None if inc is not None else standard_normals(config.seed, k_path, N, d)
    dws = np.empty((N, d))
    cps = checkpoint_idx if checkpoint_idx is not None else np.zeros(0, dtype=int)
    cp_states = np.full((1, cps.shape[0], n), np.nan)
    cp_states[0, cps == 0] = hist.endpoint
    exited, tau, tau_ref = False, math.inf, math.inf
    exit_pt = np.full((1, n), np.nan)
    failed = -1
    b_old = float(stop.b(hist.endpoint)) if stop is not None else None
    start_b = None if stop is None else np.array([b_old])
    if record:
        for j in range(h):
            a[j] = coeffs.qv_density(CadlagPath._trusted(all_t[: j + 1], all_x[: j + 1])).reshape(-1)
    x = hist.endpoint.copy()
    stopped = False
    for k in range(N):
        i = h - 1 + k
        past = CadlagPath._trusted(all_t[: i + 1], all_x[: i + 1])
        du = times[k] - all_t[i]
        dW = inc[0, k] if inc is not None else math.sqrt(du) * Z[k]
        dws[k] = dW
        if stopped:
            all_x[i + 1] = x
            a[i] = 0.0 if not record else a[i - 1]
            continue
        mu = np.asarray(coeffs.mu(past), dtype=float).reshape(n)
        sig = np.asarray(coeffs.sigma(past), dtype=float).reshape(n, d)
        if record:
            a[i] = (sig @ sig.T).reshape(-1)
        x_new = x + mu * du
        for col in range(d):
            x_new = x_new + sig[:, col] * dW[col]
        if not np.all(np.isfinite(x_new)):
            failed = k
            stopped = True
            all_x[i + 1] = x
            continue
        x = x_new
        all_x[i + 1] = x
        if stop is not None:
            b_new = float(stop.b(x))
            if b_new <= 0:
                exited, tau = True, float(times[k])
                tau_ref = float(all_t[i] + du * b_old / (b_old - b_new))
                exit_pt[0] = x
                stopped = True
            b_old = b_new
        cp_states[0, cps == k + 1] = x
    cp_states[0, cps > N] = x
    out = dict(
        final=x[None, :], exited=np.array([exited]), tau=np.array([tau]), tau_refined=np.array([tau_ref]),
        exit_point=exit_pt, checkpoint_states=cp_states, failed=np.array([failed]), start_b=start_b,
    )
    if record:
        full = CadlagPath._trusted(all_t, all_x)
        a[h + N - 1] = coeffs.qv_density(full).reshape(-1)
        out.update(rec_x=all_x[h - 1 :][None], rec_a=a[None], rec_dw=dws[None] if config.store_increments else None)
    else:
        out.update(rec_x=None, rec_a=None, rec_dw=None)
    return out


def _histories_for(history, indices: np.ndarray) -> list[CadlagPath]:
    if isinstance(history, CadlagPath):
        return [history] * len(indices)
    return [history(int(k)) if callable(history) else history[int(k)] for k in indices]


def _first_history(history) -> CadlagPath:
    if isinstance(history, CadlagPath):
        return history
    return history(0) if callable(history) else history[0]


def _check_dims(hist: CadlagPath, coeffs: PathCoefficients, config: SimConfig) -> None:
    if hist.dim != coeffs.dim:
        raise PathDomainError(f"history has dimension {hist.dim}, coefficients expect {coeffs.dim}")
    if not hist.t_end < config.horizon:
        raise ValueError(f"history ends at {hist.t_end}, not before the horizon {config.horizon}")


def _run(history, coeffs, config, indices, stop=None, checkpoints=(), record=False, threads=1, increments=None):
    h0 = _first_history(history)
    _check_dims(h0, coeffs, config)
    times = config.grid(h0.t_end)
    cps = _checkpoint_indices(times, h0.t_end, checkpoints) if len(checkpoints) else None
    kernel = _run_block if coeffs.vectorised else _run_block_exact
    bs = config.block_size
    blocks = [indices[i : i + bs] for i in range(0, len(indices), bs)]

    def work(ix: np.ndarray):
        hists = _histories_for(history, ix)
        if stop is not None:
            for k, hp in zip(ix, hists):
                if not float(stop.b(hp.endpoint)) > 0:
                    raise HittingPreconditionError(f"history of path {k} does not end inside the domain")
        inc = None
        if increments is not None:
            inc = np.asarray(increments, dtype=float)
            if inc.ndim == 2:
                inc = inc[None]
            inc = inc[ix - indices[0]] if inc.shape[0] > 1 else np.broadcast_to(inc, (len(ix),) + inc.shape[1:])
        return kernel(_Block(ix, hists), coeffs, config, times, stop, cps, record, inc)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return times, parts


def simulate(
    history: CadlagPath,
    coeffs: PathCoefficients,
    config: SimConfig,
    path_index: int = 0,
    increments: np.ndarray | None = None,
) -> Trajectory:
    """Euler–Maruyama from ``history`` to the horizon.

    ``increments`` (shape ``(n_steps, d)``) replaces the seeded stream, which
    is how coupled dt ladders are run.
    """
    _, parts = _run(history, coeffs, config, np.array([path_index]), record=True, increments=increments)
    return _trajectories(history, parts[0], coeffs, config)[0]


def _trajectories(history, part, coeffs: PathCoefficients, config: SimConfig) -> list[Trajectory]:
    out = []
    for b, k in enumerate(part["indices"]):
        if part["failed"][b] >= 0:
            raise SimulationError("non-finite state", int(part["failed"][b]), int(k))
        hist = _histories_for(history, np.array([k]))[0]
        h = len(hist)
        times = config.grid(hist.t_end)
        all_t = np.concatenate([hist.times, times])
        all_x = np.vstack([hist.values, part["rec_x"][b, 1:]])
        a_vals = part["rec_a"][b]
        if a_vals.shape[0] != all_t.shape[0]:
            # the batch kernel records from the start instant on
            head = [coeffs.qv_density(CadlagPath._trusted(hist.times[: j + 1], hist.values[: j + 1])).reshape(-1)
                    for j in range(h - 1)]
            a_vals = np.vstack(head + [a_vals])
        out.append(Trajectory(
            path=CadlagPath._trusted(all_t, all_x),
            start_time=hist.t_end,
            start_index=h - 1,
            brownian_increments=None if part["rec_dw"] is None else part["rec_dw"][b].copy(),
            qv_density=CadlagPath._trusted(all_t, a_vals),
            path_index=int(k),
        ))
    return out


def ensemble(history, coeffs: PathCoefficients, config: SimConfig, threads: int = 1) -> Iterator[Trajectory]:
    """Recorded trajectories ``0 .. n_paths-1``, block by block.

    ``history`` is one path shared by every trajectory, a sequence indexed by
    path or a callable ``k -> history``.
    """
    indices = np.arange(config.n_paths)
    bs = config.block_size
    failures: list[tuple[int, int]] = []
    for i in range(0, len(indices), bs * max(1, threads)):
        _, parts = _run(history, coeffs, config, indices[i : i + bs * max(1, threads)], record=True, threads=threads)
        for part in parts:
            bad = part["failed"] >= 0
            if bad.any():
                failures.extend((int(k), int(s)) for k, s in zip(part["indices"][bad], part["failed"][bad]))
                continue
            yield from _trajectories(history, part, coeffs, config)
    if failures:
        raise EnsembleError(failures)


def simulate_paths(
    history,
    coeffs: PathCoefficients,
    config: SimConfig,
    stop=None,
    checkpoints: Sequence[float] = (),
    threads: int = 1,
    increments: np.ndarray | None = None,
) -> EnsembleResult:
    """Streamed ensemble: per-path outcomes without storing whole paths.

    With ``stop`` (a domain), each path is frozen at its first grid exit and
    its checkpoint states are ``X(min(s, tau))``.
    """
    indices = np.arange(config.n_paths)
    times, parts = _run(history, coeffs, config, indices, stop, checkpoints, False, threads, increments)
    failures = []
    for part in parts:
        bad = part["failed"] >= 0
        failures.extend((int(k), int(s)) for k, s in zip(part["indices"][bad], part["failed"][bad]))
    if failures:
        raise EnsembleError(failures)

    def cat(key):
        return np.concatenate([p[key] for p in parts], axis=0)

    return EnsembleResult(
        final=cat("final"),
        exited=cat("exited"),
        tau=cat("tau"),
        tau_refined=cat("tau_refined"),
        exit_point=cat("exit_point"),
        checkpoint_times=np.asarray(checkpoints, dtype=float),
        checkpoint_states=cat("checkpoint_states"),
        start_b=None if stop is None else cat("start_b"),
    )


def quadratic_variation(traj: Trajectory) -> CadlagPath:
    """Left-point integral of the density from the start time, flattened matrices."""
    A = traj.qv_density
    k0 = traj.start_index
    du = np.diff(A.times)[k0:]
    incr = A.values[k0:-1] * du[:, None]
    out = np.zeros_like(A.values)
    out[k0 + 1 :] = np.cumsum(incr, axis=0)
    return CadlagPath._trusted(A.times, out)


def hitting_time(traj: Trajectory, D) -> HittingResult:
    """First grid instant at or after the start with ``b <= 0``."""
    X = traj.path
    k0 = traj.start_index
    b = np.asarray(D.b(X.values[k0:]), dtype=float).reshape(-1)
    if not b[0] > 0:
        raise HittingPreconditionError(f"trajectory starts at b = {b[0]:g}, not inside the domain")
    out = np.flatnonzero(b <= 0)
    if out.size == 0:
        return HittingResult(math.inf, math.inf, None, False)
    j = int(out[0])
    t_hi, t_lo = X.times[k0 + j], X.times[k0 + j - 1]
    refined = t_lo + (t_hi - t_lo) * b[j - 1] / (b[j - 1] - b[j])
    return HittingResult(float(t_hi), float(refined), X.values[k0 + j].copy(), True)


# --- (H2) probes -------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzReport:
    n_pairs: int
    lipschitz_ratio: float
    growth_ratio: float
    declared_lipschitz: float
    declared_growth: float
    lipschitz_violated: bool
    growth_violated: bool


def random_path_pair(rng: np.random.Generator, dim: int, n_steps: int = 12, scale: float = 2.0):
    """Two step paths on a shared random grid; the second is a perturbation of the first."""
    t_end = rng.uniform(0.1, 3.0)
    inner = np.sort(rng.uniform(0.0, t_end, n_steps - 1))
    times = np.unique(np.concatenate([[0.0], inner, [t_end]]))
    a = rng.normal(scale=scale, size=(times.size, dim))
    eps = 10.0 ** rng.uniform(-6, 0)
    b = a + eps * rng.normal(size=a.shape)
    return CadlagPath(times, a), CadlagPath(times, b)


def lipschitz_probe(coeffs: PathCoefficients, sampler=None, n_pairs: int = 1000, seed: int = 0) -> LipschitzReport:
    """Empirical (H2) ratios over ``n_pairs`` sampled path pairs.

    ``sampler(rng)`` returns two paths with the same final time.
    """
    rng = np.random.default_rng(seed)
    if sampler is None:
        def sampler(r):
            return random_path_pair(r, coeffs.dim)
    lip = 0.0
    grow = 0.0
    for _ in range(n_pairs):
        a, b = sampler(rng)
        ma, mb = np.asarray(coeffs.mu(a), float), np.asarray(coeffs.mu(b), float)
        sa, sb = np.asarray(coeffs.sigma(a), float), np.asarray(coeffs.sigma(b), float)
        dist = sup_distance(a, b)
        if dist > 0:
            lip = max(lip, (np.linalg.norm(ma - mb) + np.linalg.norm(sa - sb)) / dist)
        for m, s, p in ((ma, sa, a), (mb, sb, b)):
            grow = max(grow, (np.linalg.norm(m) + np.linalg.norm(s)) / (1.0 + sup_norm(p)))
    slack = 1e-9
    return LipschitzReport(
        n_pairs=n_pairs,
        lipschitz_ratio=float(lip),
        growth_ratio=float(grow),
        declared_lipschitz=coeffs.declared_lipschitz,
        declared_growth=coeffs.declared_growth,
        lipschitz_violated=bool(lip > coeffs.declared_lipschitz * (1 + slack) + 1e-12),
        growth_violated=bool(grow > coeffs.declared_growth * (1 + slack) + 1e-12),
    )


# --- dumps -------------------------------------------------------------------


def write_trajectory_csv(traj: Trajectory, fh: TextIO, header_comment: str | None = None) -> None:
    n = traj.path.dim
    if header_comment:
        fh.write(f"# {header_comment}\n")
    cols = ["time"] + [f"x{i}" for i in range(n)] + [f"a{i}{j}" for i in range(n) for j in range(n)]
    fh.write(",".join(cols) + "\n")
    for t, x, a in zip(traj.path.times, traj.path.values, traj.qv_density.values):
        fh.write(",".join(repr(float(v)) for v in (t, *x, *a)) + "\n")


def write_manifest(fh: TextIO, config: SimConfig, config_hash: str, extra: dict | None = None) -> None:
    doc = {"seed": config.seed, "dt": config.dt, "horizon": config.horizon,
           "n_paths": config.n_paths, "config_hash": config_hash}
    if extra:
        doc.update(extra)
    json.dump(doc, fh, indent=2, sort_keys=True)
    fh.write("\n")
