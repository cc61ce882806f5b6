"""Compact smooth domains described by their oriented distance.

Sign convention: ``b > 0`` inside, ``b = 0`` on the boundary, ``b < 0``
outside.  Derivatives and projections are only offered on the tube
``|b| < tube_width`` where ``b`` is twice differentiable with Lipschitz
second derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TubeError(ValueError):
    """Query outside the tube where the oriented distance is regular."""


class DomainError(ValueError):
    """Point outside the set where a quantity is defined."""


class ProjectionError(ArithmeticError):
    """Nearest-point iteration did not converge."""


class SmoothDomain:
    """Interface shared by the concrete domains."""

    dim: int
    tube_width: float

    def b(self, x) -> np.ndarray | float:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        raise NotImplementedError

    def grad_b(self, x) -> np.ndarray:
        raise NotImplementedError

    def hess_b(self, x) -> np.ndarray:
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def max_depth(self) -> float:
        """Upper bound on ``b`` over the domain (radius of the largest inscribed ball)."""
        raise NotImplementedError

    def sample_boundary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def normal(self, xbar) -> np.ndarray:
        """Outward unit normal at a boundary point."""
        return -self.grad_b(xbar)

    def contains_interior(self, x) -> bool:
        return bool(self.b(x) > 0)

    def _check_tube(self, x, bval: float) -> None:
        if not abs(bval) < self.tube_width:
            raise TubeError(
                f"|b(x)| = {abs(bval):.6g} is not inside the regular tube of width {self.tube_width:.6g}"
            )

    def sample_interior(self, rng: np.random.Generator, n: int, min_b: float = 0.0) -> np.ndarray:
        """Rejection sampling from the bounding box, keeping points with ``b > min_b``."""
        lo, hi = self.bounding_box()
        out = []
        count = 0
        while count < n:
            cand = rng.uniform(lo, hi, size=(max(2 * (n - count), 16), self.dim))
            keep = cand[np.asarray(self.b(cand)) > min_b]
            out.append(keep)
            count += keep.shape[0]
        return np.vstack(out)[:n]

    def sample_tube(self, rng: np.random.Generator, n: int, width: float | None = None) -> np.ndarray:
        """Points ``xbar - s * normal`` with ``s`` uniform in ``(-width, width)``; ``b`` equals ``s``."""
        width = 0.999 * self.tube_width if width is None else width
        xbar = self.sample_boundary(rng, n)
        s = rng.uniform(-width, width, size=n)
        normals = np.array([self.normal(p) for p in xbar])
        return xbar - s[:, None] * normals


@dataclass(frozen=True, eq=False)
class BallDomain(SmoothDomain):
    center: np.ndarray
    radius: float
    tube_width: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        eps = self.radius / 2 if self.tube_width is None else float(self.tube_width)
        if not 0 < eps < self.radius:
            raise ValueError("tube_width must lie in (0, radius)")
        object.__setattr__(self, "tube_width", eps)

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.center.shape[0]

    @property
    def max_depth(self) -> float:
        return self.radius

    def b(self, x):
        x = np.asarray(x, dtype=float)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def _radial(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        r = float(np.linalg.norm(d))
        # the closed forms hold wherever the radial direction is defined,
        # which is wider than the nominal tube
        if not r > 0:
            raise TubeError("ball derivatives and projection are undefined at the center")
        return d, r

    def project(self, x):
        d, r = self._radial(x)
        return self.center + self.radius * d / r

    def grad_b(self, x):
        d, r = self._radial(x)
        return -d / r

    def hess_b(self, x):
        d, r = self._radial(x)
        u = d / r
        return -(np.eye(self.dim) - np.outer(u, u)) / r

    def interior_point(self):
        return self.center.copy()

    def sample_boundary(self, rng, n):
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return self.center + self.radius * z

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius


# --- ellipsoid nearest point ------------------------------------------------


def _nearest_degenerate(e: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Closest point for ``y >= 0`` with some zero coordinates; ``e`` sorted descending."""
    n = e.shape[0]
    if n == 1:
        return np.array([e[0]])
    x = np.zeros(n)
    if y[-1] > 0:
        pos = y > 0
        x[pos] = _nearest_generic(e[pos][None, :], y[pos][None, :])[0]
        return x
    # smallest-axis coordinate is zero: either the closest point leaves that
    # axis plane (t = -e_last^2) or the problem reduces by one dimension
    denom = e[:-1] ** 2 - e[-1] ** 2
    numer = e[:-1] * y[:-1]
    if np.all(denom > 0) and np.all(numer < denom):
        xde = numer / denom
        discr = 1.0 - float(xde @ xde)
        if discr > 0:
            x[:-1] = e[:-1] * xde
            x[-1] = e[-1] * math.sqrt(discr)
            return x
    sub = y[:-1]
    if np.all(sub > 0):
        x[:-1] = _nearest_generic(e[:-1][None, :], sub[None, :])[0]
    else:
        x[:-1] = _nearest_degenerate(e[:-1], sub)
    return x


def _nearest_generic(e: np.ndarray, y: np.ndarray, max_iter: int = 100) -> np.ndarray:
    """Closest points for rows ``y > 0`` by Newton on the Lagrange multiplier.

    With ``u = t + e_min^2`` the multiplier solves
    ``S = sum (e_i y_i / (u + e_i^2 - e_min^2))^2 = 1``.  Newton runs on
    ``R = S^(-1/2) - 1`` in the variable ``log u``: ``R`` is exactly linear
    when one term dominates and the log keeps roots close to the pole
    (interior points near an axis) well scaled.  Steps leaving the current
    bracket fall back to bisection.
    """
    e = np.broadcast_to(e, y.shape)
    e2 = e**2
    gap = e2 - e2[:, -1:]  # exactly zero on the smallest axis
    ey = e * y
    lo = np.log(ey[:, -1])
    hi = np.log(np.linalg.norm(ey, axis=1))
    s = np.sqrt(np.sum((y / e) ** 2, axis=1))
    v = np.clip(np.log(e2[:, -1] * s), lo, hi)
    eps = np.finfo(float).eps
    for _ in range(max_iter):
        u = np.exp(v)
        w = 1.0 / (u[:, None] + gap)
        q2 = (ey * w) ** 2
        S = np.sum(q2, axis=1)
        R = 1.0 / np.sqrt(S) - 1.0
        dR = u * np.sum(q2 * w, axis=1) / S**1.5
        lo = np.where(R < 0, v, lo)
        hi = np.where(R > 0, v, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            vn = v - R / dR
        # convergence is judged on the raw Newton step, before safeguarding
        done = (np.abs(R) <= 8 * eps) | (np.abs(vn - v) <= 4 * eps * np.maximum(1.0, np.abs(v)))
        bad = ~np.isfinite(vn) | (vn < lo) | (vn > hi)
        v = np.where(R == 0, v, np.where(bad, 0.5 * (lo + hi), vn))
        if np.all(done):
            break
    return e2 * y / (np.exp(v)[:, None] + gap)


def _nearest_one(e: tuple, y: tuple, max_iter: int = 100) -> list[float]:
    # _nearest_generic for a single row in plain floats: same iteration, no array overhead
    e2 = [a * a for a in e]
    gap = [a - e2[-1] for a in e2]
    ey = [a * b for a, b in zip(e, y)]
    lo = math.log(ey[-1])
    hi = math.log(math.sqrt(math.fsum(c * c for c in ey)))
    s = math.sqrt(math.fsum((b / a) ** 2 for a, b in zip(e, y)))
    v = min(max(math.log(e2[-1] * s), lo), hi)
    eps = 2.220446049250313e-16
    for _ in range(max_iter):
        u = math.exp(v)
        w = [1.0 / (u + g) for g in gap]
        q2 = [(c * wi) ** 2 for c, wi in zip(ey, w)]
        S = math.fsum(q2)
        R = 1.0 / math.sqrt(S) - 1.0
        if R == 0.0:
            break
        dR = u * math.fsum(q * wi for q, wi in zip(q2, w)) / S**1.5
        if R < 0:
            lo = v
        else:
            hi = v
        vn = v - R / dR if dR > 0 else math.nan
        done = abs(R) <= 8 * eps or abs(vn - v) <= 4 * eps * max(1.0, abs(v))
        v = vn if lo <= vn <= hi else 0.5 * (lo + hi)
        if done:
            break
    u = math.exp(v)
    return [a * b / (u + g) for a, b, g in zip(e2, y, gap)]


@dataclass(frozen=True, eq=False)
class EllipsoidDomain(SmoothDomain):
    center: np.ndarray
    semi_axes: np.ndarray
    tube_width: float = field(default=None)  # type: ignore[assignment]
    constraint_tol: float = 1e-10
    _order: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        a = np.atleast_1d(np.asarray(self.semi_axes, dtype=float))
        if c.shape != a.shape:
            raise ValueError("center and semi_axes must have the same length")
        if np.any(a <= 0):
            raise ValueError("semi-axes must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semi_axes", a)
        reach = float(a.min() ** 2 / a.max())
        eps = 0.5 * reach if self.tube_width is None else float(self.tube_width)
        if not 0 < eps < reach:
            raise ValueError(f"tube_width must lie in (0, {reach:g}) (curvature bound)")
        object.__setattr__(self, "tube_width", eps)
        object.__setattr__(self, "_order", np.argsort(-a, kind="stable"))

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.center.shape[0]

    @property
    def max_depth(self) -> float:
        return float(self.semi_axes.min())

    def _nearest(self, x: np.ndarray) -> np.ndarray:
        """Nearest boundary point for each row of ``x`` (no tube check)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x - self.center
        sign = np.where(d < 0, -1.0, 1.0)
        order = self._order
        y = np.abs(d)[:, order]
        e = self.semi_axes[order]
        tiny = 1e-14 * e[0]
        y = np.where(y < tiny, 0.0, y)
        out = np.empty_like(y)
        gen = np.all(y > 0, axis=1)
        if y.shape[0] == 1 and gen[0]:
            out[0] = _nearest_one(tuple(e.tolist()), tuple(y[0].tolist()))
        elif np.any(gen):
            out[gen] = _nearest_generic(e[None, :], y[gen])
        for k in np.flatnonzero(~gen):
            out[k] = _nearest_degenerate(e, y[k])
        res = np.empty_like(out)
        res[:, order] = out
        return self.center + sign * res

    def b(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dim)
        xbar = self._nearest(flat)
        dist = np.linalg.norm(flat - xbar, axis=1)
        level = np.sum(((flat - self.center) / self.semi_axes) ** 2, axis=1)
        val = np.where(level < 1.0, dist, -dist)
        val = np.where(level == 1.0, 0.0, val)
        return val.reshape(x.shape[:-1]) if x.ndim > 1 else float(val[0])

    def nearest_point(self, x) -> np.ndarray:
        """Closest boundary point without the tube precondition.

        Unique everywhere except on the interior medial set (e.g. the
        central segment of the major axis), where one of the minimisers is
        returned.
        """
        return self._nearest(np.asarray(x, dtype=float))[0]

    def project(self, x):
        x = np.asarray(x, dtype=float)
        xbar = self._nearest(x)[0]
        self._check_tube(x, float(self.b(x)))
        resid = abs(float(np.sum(((xbar - self.center) / self.semi_axes) ** 2)) - 1.0)
        if resid > self.constraint_tol:
            raise ProjectionError(
                f"projection of {x} did not reach the boundary: |constraint| = {resid:.3e}"
            )
        return xbar

    def _unit_normal(self, xbar):
        g = (xbar - self.center) / self.semi_axes**2
        return g / np.linalg.norm(g), 2.0 * np.linalg.norm(g)

    def normal(self, xbar):
        return self._unit_normal(np.asarray(xbar, dtype=float))[0]

    def grad_b(self, x):
        xbar = self.project(x)
        return -self._unit_normal(xbar)[0]

    def hess_b(self, x):
        x = np.asarray(x, dtype=float)
        xbar = self.project(x)
        bval = float(self.b(x))
        nvec, gnorm = self._unit_normal(xbar)
        P = np.eye(self.dim) - np.outer(nvec, nvec)
        S = P @ np.diag(2.0 / self.semi_axes**2) @ P / gnorm
        H = -S @ np.linalg.inv(np.eye(self.dim) - bval * S)
        return 0.5 * (H + H.T)

    def interior_point(self):
        return self.center.copy()

    def sample_boundary(self, rng, n):
        # directions uniform on the sphere, scaled radially onto the surface
        z = rng.standard_normal((n, self.dim))
        scale = np.sqrt(np.sum((z / self.semi_axes) ** 2, axis=1))
        return self.center + z / scale[:, None]

    def bounding_box(self):
        return self.center - self.semi_axes, self.center + self.semi_axes


@dataclass(frozen=True, eq=False)
class InnerDomain(SmoothDomain):
    """``{x in K : b_K(x) >= level}``, exposed through ``b_K - level``."""

    parent: SmoothDomain
    level: float

    def __post_init__(self):
        if not 0 < self.level < self.parent.tube_width:
            raise ValueError(
                f"inner level {self.level:g} must lie in (0, {self.parent.tube_width:g})"
            )

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.parent.dim

    @property
    def tube_width(self) -> float:  # type: ignore[override]
        return min(self.level, self.parent.tube_width - self.level)

    @property
    def max_depth(self) -> float:
        return self.parent.max_depth - self.level

    def b(self, x):
        return self.parent.b(x) - self.level

    def _in_tube(self, x):
        self._check_tube(x, float(self.b(x)))

    def grad_b(self, x):
        self._in_tube(x)
        return self.parent.grad_b(x)

    def hess_b(self, x):
        self._in_tube(x)
        return self.parent.hess_b(x)

    def project(self, x):
        self._in_tube(x)
        # follow the parent's normal line inward by `level`
        xbar = self.parent.project(x)
        return xbar + self.level * self.parent.grad_b(xbar)

    def normal(self, xbar):
        return -self.parent.grad_b(xbar)

    def interior_point(self):
        return self.parent.interior_point()

    def sample_boundary(self, rng, n):
        pts = self.parent.sample_boundary(rng, n)
        return np.array([p + self.level * self.parent.grad_b(p) for p in pts])

    def bounding_box(self):
        return self.parent.bounding_box()


def inner_domain(D: SmoothDomain, i: int) -> InnerDomain:
    """Inner approximation at level ``1/i``; needs ``1/i < tube_width``."""
    if i < 1 or not 1.0 / i < D.tube_width:
        raise ValueError(f"inner index {i} too small: 1/i must be below {D.tube_width:g}")
    return InnerDomain(D, 1.0 / i)


def oriented_distance(D: SmoothDomain, x) -> float:
    return float(D.b(x))


def project_boundary(D: SmoothDomain, x) -> np.ndarray:
    return D.project(x)


# --- barrier ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Barrier:
    """Smooth clamp ``g`` of ``b`` and the log barrier ``psi = -log g``.

    ``g = h(b)`` with ``h(b) = b`` below ``lower``, constant above ``upper``,
    and a quintic Hermite blend in between (slope from 1 to 0, curvature 0 at
    both ends).  The blend is centred at ``min(tube_width / (1 + delta), 1)``
    so that ``upper`` never leaves the tube and the plateau stays in (0, 1].
    """

    domain: SmoothDomain
    delta_blend: float = 0.25

    def __post_init__(self):
        if not 0 < self.delta_blend < 1:
            raise ValueError("delta_blend must lie in (0, 1)")
        if self.upper >= self.domain.max_depth:
            raise ValueError("blend region reaches the deepest interior point; shrink tube_width")

    @property
    def center(self) -> float:
        return min(self.domain.tube_width / (1.0 + self.delta_blend), 1.0)

    @property
    def lower(self) -> float:
        """Below this depth ``g`` coincides with ``b``."""
        return self.center * (1.0 - self.delta_blend)

    @property
    def upper(self) -> float:
        return self.center * (1.0 + self.delta_blend)

    @property
    def plateau(self) -> float:
        return self.center

    def _h(self, b: float) -> tuple[float, float, float]:
        a, c = self.lower, self.upper
        if b <= a:
            return b, 1.0, 0.0
        if b >= c:
            return self.plateau, 0.0, 0.0
        w = c - a
        s = (b - a) / w
        h = a + w * (s - s**3 + 0.5 * s**4)
        return h, 1.0 - 3.0 * s**2 + 2.0 * s**3, (-6.0 * s + 6.0 * s**2) / w

    def g(self, x) -> float:
        return self._h(float(self.domain.b(x)))[0]

    def g_batch(self, x) -> np.ndarray:
        b = np.asarray(self.domain.b(x), dtype=float)
        a, c = self.lower, self.upper
        s = np.clip((b - a) / (c - a), 0.0, 1.0)
        blend = a + (c - a) * (s - s**3 + 0.5 * s**4)
        return np.where(b <= a, b, np.where(b >= c, self.plateau, blend))

    def g_derivatives(self, x) -> tuple[float, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        b = float(self.domain.b(x))
        h, h1, h2 = self._h(b)
        n = self.domain.dim
        if h1 == 0.0 and h2 == 0.0:
            return h, np.zeros(n), np.zeros((n, n))
        gb = self.domain.grad_b(x)
        Hb = self.domain.hess_b(x)
        return h, h1 * gb, h2 * np.outer(gb, gb) + h1 * Hb

    def psi(self, x) -> float:
        g = self.g(x)
        if not g > 0:
            raise DomainError("psi is only defined in the interior")
        return -math.log(g)

    def psi_batch(self, x) -> np.ndarray:
        g = self.g_batch(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(g > 0, -np.log(np.where(g > 0, g, 1.0)), np.inf)

    def values(self, x):
        """``(g, psi, grad psi, hess psi)`` at an interior point."""
        g, dg, Hg = self.g_derivatives(x)
        if not g > 0:
            raise DomainError("psi is only defined in the interior")
        return g, -math.log(g), -dg / g, -Hg / g + np.outer(dg, dg) / g**2


def barrier_values(B: Barrier, x):
    return B.values(x)


# --- regularity --------------------------------------------------------------


@dataclass(frozen=True)
class RegularityReport:
    n_boundary: int
    min_grad_norm: float
    max_grad_norm: float
    max_tube_grad_deviation: float
    hessian_lipschitz: float
    passed: bool


def check_regularity(
    D: SmoothDomain, n: int = 1000, seed: int = 0, tol: float = 1e-8
) -> RegularityReport:
    """Unit-gradient check on boundary and tube samples plus a Hessian Lipschitz estimate.

    For a C^{2,1} domain the gradient of ``b`` on the boundary is a single
    unit vector, so its convex hull cannot contain 0.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x5E6]))
    bnd = D.sample_boundary(rng, n)
    gn = np.array([np.linalg.norm(D.grad_b(p)) for p in bnd])
    tube = D.sample_tube(rng, n)
    tn = np.array([np.linalg.norm(D.grad_b(p)) for p in tube])
    # Lipschitz estimate of the Hessian over close pairs in the tube
    step = 1e-3 * D.tube_width
    lip = 0.0
    for p in tube[: min(n, 200)]:
        q = p + step * rng.standard_normal(D.dim) / math.sqrt(D.dim)
        if abs(float(D.b(q))) >= D.tube_width:
            continue
        diff = np.linalg.norm(D.hess_b(p) - D.hess_b(q), ord=2)
        lip = max(lip, diff / np.linalg.norm(p - q))
    dev = float(np.max(np.abs(tn - 1.0)))
    return RegularityReport(
        n_boundary=n,
        min_grad_norm=float(gn.min()),
        max_grad_norm=float(gn.max()),
        max_tube_grad_deviation=dev,
        hessian_lipschitz=float(lip),
        passed=bool(np.max(np.abs(gn - 1.0)) <= tol and dev <= tol),
    )


def domain_from_spec(spec: dict) -> SmoothDomain:
    """Build a domain from ``{kind, center, radius | semi_axes, tube_width?}``."""
    kind = spec.get("kind")
    tube = spec.get("tube_width")
    if kind == "ball":
        return BallDomain(np.asarray(spec["center"], dtype=float), float(spec["radius"]), tube)
    if kind == "ellipsoid":
        return EllipsoidDomain(
            np.asarray(spec["center"], dtype=float), np.asarray(spec["semi_axes"], dtype=float), tube
        )
    raise ValueError(f"unknown domain kind {kind!r}")
