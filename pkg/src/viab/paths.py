"""Right-continuous step paths and the path operations used throughout.

A :class:`CadlagPath` on ``[0, t_end]`` holds sample instants ``times`` and
one value per instant.  On ``[times[k], times[k+1])`` the path equals
``values[k]``; at ``t_end`` it equals the last value.  Matrix-valued paths
(quadratic-variation densities) are stored flattened row-major, so a path
of ``n x n`` matrices has ``dim == n * n``.

All operations return new paths; arrays are marked read-only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np


class PathDomainError(ValueError):
    """Raised when an operation is asked for a time or shape outside its domain."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class CadlagPath:
    """Piecewise-constant right-continuous path with values in R^dim."""

    __slots__ = ("times", "values")

    def __init__(self, times, values, t_end: float | None = None):
        times = np.array(times, dtype=float).reshape(-1)
        values = np.array(values, dtype=float)
        if values.ndim == 1 and len(times) and values.size % len(times) == 0:
            values = values.reshape(len(times), -1)
        if values.ndim != 2 or values.shape[0] != times.shape[0]:
            raise PathDomainError(
                f"need one value per time: {times.shape[0]} times, values shape {values.shape}"
            )
        if times.shape[0] == 0:
            raise PathDomainError("a path needs at least one sample")
        if times[0] != 0.0:
            raise PathDomainError(f"times[0] must be 0, got {times[0]!r}")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise PathDomainError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise PathDomainError("times and values must be finite")
        if t_end is not None and t_end != times[-1]:
            if t_end < times[-1]:
                raise PathDomainError(f"t_end={t_end} precedes last sample {times[-1]}")
            times = np.append(times, float(t_end))
            values = np.vstack([values, values[-1]])
        self.times = _freeze(times)
        self.values = _freeze(values)

    @classmethod
    def _trusted(cls, times: np.ndarray, values: np.ndarray) -> "CadlagPath":
        # Internal constructor: caller guarantees the invariants.
        p = object.__new__(cls)
        if times.flags.writeable:
            times.flags.writeable = False
        if values.flags.writeable:
            values.flags.writeable = False
        p.times = times
        p.values = values
        return p

    @classmethod
    def constant(cls, value, t_end: float = 0.0) -> "CadlagPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls([0.0], value.reshape(1, -1), t_end=t_end)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1]

    def __len__(self) -> int:
        return self.times.shape[0]

    def __repr__(self) -> str:
        return f"CadlagPath(n_samples={len(self)}, dim={self.dim}, t_end={self.t_end:g})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, CadlagPath):
            return NotImplemented
        return equivalent(self, other)

    __hash__ = None  # type: ignore[assignment]

    def value_at(self, s: float) -> np.ndarray:
        if not (0.0 <= s <= self.t_end):
            raise PathDomainError(f"s={s} outside [0, {self.t_end}]")
        k = int(np.searchsorted(self.times, s, side="right")) - 1
        return self.values[k]

    def values_at(self, s) -> np.ndarray:
        """Vectorised right-continuous evaluation at an array of instants."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0.0) or np.any(s > self.t_end):
            raise PathDomainError(f"instants outside [0, {self.t_end}]")
        k = np.searchsorted(self.times, s, side="right") - 1
        return self.values[k]

    def left_limit_at(self, s: float) -> np.ndarray:
        if not (0.0 <= s <= self.t_end):
            raise PathDomainError(f"s={s} outside [0, {self.t_end}]")
        if s == 0.0:
            return self.values[0]
        k = int(np.searchsorted(self.times, s, side="left")) - 1
        return self.values[k]


def value_at(p: CadlagPath, s: float) -> np.ndarray:
    return p.value_at(s)


def left_limit_at(p: CadlagPath, s: float) -> np.ndarray:
    return p.left_limit_at(s)


def restrict(p: CadlagPath, t: float) -> CadlagPath:
    """Restriction of ``p`` to ``[0, t]``; a sample is inserted at ``t`` if absent."""
    if not (0.0 <= t <= p.t_end):
        raise PathDomainError(f"cannot restrict a path on [0, {p.t_end}] to [0, {t}]")
    k = int(np.searchsorted(p.times, t, side="right"))
    if p.times[k - 1] == t:
        return CadlagPath._trusted(p.times[:k], p.values[:k])
    times = np.append(p.times[:k], t)
    values = np.vstack([p.values[:k], p.values[k - 1]])
    return CadlagPath._trusted(times, values)


def restrict_to_index(p: CadlagPath, k: int) -> CadlagPath:
    """Restriction to ``[0, times[k]]`` as an O(1) view."""
    return CadlagPath._trusted(p.times[: k + 1], p.values[: k + 1])


def horizontal_extend(p: CadlagPath, delta: float) -> CadlagPath:
    """Flat extension: the final value is frozen on ``[t_end, t_end + delta]``."""
    if delta < 0 or not math.isfinite(delta):
        raise PathDomainError(f"extension length must be >= 0, got {delta}")
    if delta == 0:
        return p
    times = np.append(p.times, p.t_end + delta)
    values = np.vstack([p.values, p.values[-1]])
    return CadlagPath._trusted(times, values)


def with_endpoint(p: CadlagPath, value) -> CadlagPath:
    """Copy of ``p`` whose value at the final instant is replaced by ``value``."""
    value = np.asarray(value, dtype=float).reshape(-1)
    if value.shape[0] != p.dim:
        raise PathDomainError(f"endpoint has dimension {value.shape[0]}, path has {p.dim}")
    values = p.values.copy()
    values[-1] = value
    return CadlagPath._trusted(p.times, values)


def vertical_bump(p: CadlagPath, e) -> CadlagPath:
    """Shift the value at the final instant by ``e``; the past is untouched."""
    e = np.asarray(e, dtype=float).reshape(-1)
    if e.shape[0] != p.dim:
        raise PathDomainError(f"bump has dimension {e.shape[0]}, path has {p.dim}")
    return with_endpoint(p, p.values[-1] + e)


def concat(head: CadlagPath, tail: CadlagPath) -> CadlagPath:
    """``head`` on ``[0, head.t_end)`` followed by ``tail`` on ``[head.t_end, tail.t_end]``."""
    if head.dim != tail.dim:
        raise PathDomainError("concat needs paths of equal dimension")
    tb = head.t_end
    if tb > tail.t_end:
        raise PathDomainError(
            f"head lives on [0, {tb}] which is longer than tail on [0, {tail.t_end}]"
        )
    if tb == 0.0:
        return tail
    kh = int(np.searchsorted(head.times, tb, side="left"))
    kt = int(np.searchsorted(tail.times, tb, side="left"))
    t_parts = [head.times[:kh]]
    v_parts = [head.values[:kh]]
    if kt >= len(tail) or tail.times[kt] != tb:
        t_parts.append(np.array([tb]))
        v_parts.append(tail.value_at(tb)[None, :])
    t_parts.append(tail.times[kt:])
    v_parts.append(tail.values[kt:])
    return CadlagPath._trusted(np.concatenate(t_parts), np.vstack(v_parts))


def sup_norm(p: CadlagPath) -> float:
    return float(np.max(np.linalg.norm(p.values, axis=1)))


def _union_grid(a: CadlagPath, b: CadlagPath) -> np.ndarray:
    return np.union1d(a.times, b.times)


def sup_distance(a: CadlagPath, b: CadlagPath) -> float:
    """Sup norm of ``a - b`` for two paths on the same interval (union grid)."""
    if a.t_end != b.t_end:
        raise PathDomainError("sup_distance needs paths on the same interval")
    grid = _union_grid(a, b)
    return float(np.max(np.linalg.norm(a.values_at(grid) - b.values_at(grid), axis=1)))


def equivalent(a: CadlagPath, b: CadlagPath, atol: float = 0.0) -> bool:
    """True if ``a`` and ``b`` define the same step function (up to ``atol``)."""
    if a.dim != b.dim or a.t_end != b.t_end:
        return False
    return sup_distance(a, b) <= atol


@dataclass(frozen=True)
class PathPair:
    """A state path ``x`` and a matrix-valued second path ``v`` on the same interval."""

    x: CadlagPath
    v: CadlagPath

    def __post_init__(self):
        if self.x.t_end != self.v.t_end:
            raise PathDomainError(
                f"x and v must share t_end ({self.x.t_end} != {self.v.t_end})"
            )
        n = self.x.dim
        if self.v.dim != n * n:
            raise PathDomainError(f"v must hold flattened {n}x{n} matrices, got dim {self.v.dim}")
        m = self.v.values.reshape(-1, n, n)
        if np.max(np.abs(m - np.swapaxes(m, 1, 2)), initial=0.0) > 1e-12:
            raise PathDomainError("v values must be symmetric")

    @classmethod
    def _trusted(cls, x: CadlagPath, v: CadlagPath) -> "PathPair":
        pair = object.__new__(cls)
        object.__setattr__(pair, "x", x)
        object.__setattr__(pair, "v", v)
        return pair

    @classmethod
    def with_zero_v(cls, x: CadlagPath) -> "PathPair":
        v = CadlagPath._trusted(x.times, np.zeros((len(x), x.dim * x.dim)))
        return cls._trusted(x, v)

    @property
    def t_end(self) -> float:
        return self.x.t_end

    def restrict(self, t: float) -> "PathPair":
        return PathPair._trusted(restrict(self.x, t), restrict(self.v, t))

    def extend(self, delta: float) -> "PathPair":
        return PathPair._trusted(horizontal_extend(self.x, delta), horizontal_extend(self.v, delta))


def d_infinity(a: PathPair, b: PathPair) -> float:
    """Distance between pairs; ``a`` must be the shorter one.

    The shorter pair is extended flat by ``h = b.t_end - a.t_end`` and the
    sup distances of both components are added to ``h``.
    """
    h = b.t_end - a.t_end
    if h < 0:
        raise PathDomainError("first argument must not be longer than the second; swap them")
    ax = horizontal_extend(a.x, h)
    av = horizontal_extend(a.v, h)
    # exact sums like 0.1 + 0.2 may miss b.t_end by an ulp; realign the end time
    if ax.t_end != b.t_end:
        ax = CadlagPath._trusted(np.append(ax.times[:-1], b.t_end), ax.values)
        av = CadlagPath._trusted(np.append(av.times[:-1], b.t_end), av.values)
    return sup_distance(ax, b.x) + sup_distance(av, b.v) + h


def write_csv(p: CadlagPath, fh: TextIO, header_comment: str | None = None) -> None:
    """Write ``time,c0,c1,...`` rows; floats use round-trip ``repr``."""
    if header_comment:
        fh.write(f"# {header_comment}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time"] + [f"c{i}" for i in range(p.dim)])
    for t, row in zip(p.times, p.values):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_csv(fh: TextIO | str) -> CadlagPath:
    """Read a path written by :func:`write_csv`; times are validated as monotone."""
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if not rows or rows[0][0] != "time":
        raise PathDomainError("missing 'time,c0,...' header")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    if data.size == 0:
        raise PathDomainError("path file has no samples")
    return CadlagPath(data[:, 0], data[:, 1:])


def from_samples(samples: Iterable[tuple[float, object]], t_end: float | None = None) -> CadlagPath:
    """Convenience builder from ``(time, value)`` pairs."""
    samples = list(samples)
    times = [s for s, _ in samples]
    values = [np.atleast_1d(np.asarray(v, dtype=float)) for _, v in samples]
    return CadlagPath(times, np.vstack(values), t_end=t_end)
