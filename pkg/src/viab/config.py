"""Experiment configuration: TOML parsing, validation with line numbers, hashing."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .domains import domain_from_spec
from .functional_calculus import FUNCTIONAL_CATALOG
from .sde import DRIFT_CATALOG, SIGMA_CATALOG

CHECKS = ("condition_ii", "exit", "lyapunov", "supermartingale", "roundtrip", "ito_verify")
DOMAIN_KINDS = ("ball", "ellipsoid")
LADDER_FUNCTIONALS = ("endpoint_affine", "endpoint_quadratic", "path_integral", "running_sup")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.line = line


class _Locator:
    """Best-effort line lookup for ``[section]`` headers and ``key =`` lines."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def section(self, name: str) -> int | None:
        pat = re.compile(r"^\s*\[\s*" + re.escape(name) + r"\s*\]")
        for i, line in enumerate(self.lines, 1):
            if pat.match(line):
                return i
        return None

    def key(self, section: str | None, key: str) -> int | None:
        start = self.section(section) if section else 0
        if start is None:
            return None
        pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        hdr = re.compile(r"^\s*\[")
        # ``start`` is the 1-based header line, so self.lines[start] follows it
        for i in range(start, len(self.lines)):
            if hdr.match(self.lines[i]):
                break
            if pat.match(self.lines[i]):
                return i + 1
        return start or None


@dataclass(frozen=True)
class ItoSpec:
    functional: dict
    dts: tuple[float, ...]
    n_seeds: int
    horizon: float
    start: tuple[float, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    domain: dict
    drift: dict
    sigma: dict
    dim: int
    dt: float
    horizons: tuple[float, ...]
    n_paths: int
    seed: int
    start: tuple[float, ...] | None
    checks: tuple[str, ...]
    tol_generator: float = 1e-6
    tol_tangency: float | None = None
    boundary_times: tuple[float, ...] = (0.0, 0.5, 1.0)
    n_per_time: int = 100
    lyapunov_n: int = 200
    sm_checkpoints: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    sm_n_paths: int = 2000
    sm_inner_index: int | None = None
    closure_depth_fractions: tuple[float, ...] = (0.5, 0.25, 0.125)
    closure_n_paths: int = 1000
    ito: ItoSpec | None = None
    out_dir: str | None = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace

        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("sim", {})["seed"] = seed
        return replace(self, seed=seed, raw=raw)

    def config_hash(self) -> str:
        """sha256 of the canonical document, leaving out where outputs go."""
        doc = {k: v for k, v in self.raw.items() if k != "output"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _num(v, what: str, fail, lo=None, hi=None, integer=False, strict_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        fail(f"{what} must be a number, got {v!r}")
    if integer and not (isinstance(v, int) or float(v).is_integer()):
        fail(f"{what} must be an integer, got {v!r}")
    if not math.isfinite(v):
        fail(f"{what} must be finite")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        fail(f"{what} must be {'>' if strict_lo else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        fail(f"{what} must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _vec(v, what: str, fail, n: int | None = None) -> tuple[float, ...]:
    if not isinstance(v, list) or not v:
        fail(f"{what} must be a non-empty list of numbers")
    out = tuple(_num(x, what, fail) for x in v)
    if n is not None and len(out) != n:
        fail(f"{what} must have {n} entries, got {len(out)}")
    return out


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    """Parse and validate; every error names the offending field and, where found, its line."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"not valid TOML: {e}", path, int(m.group(1)) if m else None) from None
    loc = _Locator(text)

    def failer(section, key=None):
        def fail(msg):
            line = loc.key(section, key) if key else loc.section(section) if section else None
            raise ConfigError(f"[{section}] {msg}" if section else msg, path, line)
        return fail

    def need(section: str) -> dict:
        if section not in raw or not isinstance(raw[section], dict):
            failer(None)(f"missing required section [{section}]")
        return raw[section]

    def get(sec: dict, section: str, key: str):
        if key not in sec:
            failer(section)(f"missing required field '{key}'")
        return sec[key]

    dom = need("domain")
    kind = get(dom, "domain", "kind")
    if kind not in DOMAIN_KINDS:
        failer("domain", "kind")(f"kind must be one of {', '.join(DOMAIN_KINDS)}, got {kind!r}")
    center = _vec(get(dom, "domain", "center"), "center", failer("domain", "center"))
    dim = len(center)
    if kind == "ball":
        _num(get(dom, "domain", "radius"), "radius", failer("domain", "radius"), lo=0, strict_lo=True)
    else:
        axes = _vec(get(dom, "domain", "semi_axes"), "semi_axes", failer("domain", "semi_axes"), n=dim)
        if min(axes) <= 0:
            failer("domain", "semi_axes")("semi_axes must be positive")
    if "tube_width" in dom:
        _num(dom["tube_width"], "tube_width", failer("domain", "tube_width"), lo=0, strict_lo=True)
    try:
        domain_from_spec(dom)
    except (ValueError, KeyError) as e:
        failer("domain")(str(e))

    coef = need("coefficients")
    terms = {}
    for key, catalog in (("drift", DRIFT_CATALOG), ("sigma", SIGMA_CATALOG)):
        spec = get(coef, "coefficients", key)
        fail = failer("coefficients", key)
        if isinstance(spec, str):
            spec = {"name": spec}
        if not isinstance(spec, dict) or "name" not in spec:
            fail(f"{key} must be a catalog name or a table with 'name'")
        if spec["name"] not in catalog:
            fail(f"unknown {key} {spec['name']!r}; known: {', '.join(sorted(catalog))}")
        required = catalog[spec["name"]][1]
        for p in required:
            if p not in spec:
                fail(f"{key} {spec['name']!r} needs parameter '{p}'")
        for p in spec:
            if p != "name" and p not in required:
                fail(f"{key} {spec['name']!r} does not take parameter '{p}'")
            if p != "name" and p != "m":
                _num(spec[p], f"{key}.{p}", fail)
        if "m" in spec:
            _vec(spec["m"], f"{key}.m", fail, n=dim)
        terms[key] = dict(spec)
    if terms["sigma"]["name"] in ("rot_tangent_sigma", "path_scaled_rot_sigma") and dim != 2:
        failer("coefficients", "sigma")(f"{terms['sigma']['name']} needs a 2-D domain, got dimension {dim}")

    checks_sec = need("checks")
    checks = get(checks_sec, "checks", "run")
    fail = failer("checks", "run")
    if not isinstance(checks, list) or not checks:
        fail("run must be a non-empty list")
    for c in checks:
        if c not in CHECKS:
            fail(f"unknown check {c!r}; known: {', '.join(CHECKS)}")

    sim = raw.get("sim", {})
    S = lambda k: failer("sim", k)  # noqa: E731
    sim_needed = any(c != "ito_verify" for c in checks)
    if sim_needed:
        for k in ("dt", "horizons", "n_paths"):
            get(sim, "sim", k)
    dt = _num(sim.get("dt", 1e-3), "dt", S("dt"), lo=0, strict_lo=True)
    horizons = _vec(sim.get("horizons", [1.0, 5.0, 25.0]), "horizons", S("horizons"))
    if min(horizons) <= 0:
        S("horizons")("horizons must be positive")
    if dt > min(horizons):
        S("dt")(f"dt={dt} exceeds the shortest horizon {min(horizons)}")
    n_paths = _num(sim.get("n_paths", 1000), "n_paths", S("n_paths"), lo=1, integer=True)
    seed = _num(sim.get("seed", 0), "seed", S("seed"), lo=0, hi=2**64 - 1, integer=True)
    start = tuple(_vec(sim["start"], "start", S("start"), n=dim)) if "start" in sim else None

    tol = raw.get("tolerances", {})
    tol_g = _num(tol.get("generator", 1e-6), "generator", failer("tolerances", "generator"), lo=0, strict_lo=True)
    tol_t = tol.get("tangency")
    if tol_t is not None:
        tol_t = _num(tol_t, "tangency", failer("tolerances", "tangency"), lo=0, strict_lo=True)

    cii = raw.get("condition_ii", {})
    btimes = _vec(cii.get("times", [0.0, 0.5, 1.0]), "times", failer("condition_ii", "times"))
    if min(btimes) < 0:
        failer("condition_ii", "times")("times must be >= 0")
    n_per = _num(cii.get("n_per_time", 100), "n_per_time", failer("condition_ii", "n_per_time"), lo=1, integer=True)

    ly = raw.get("lyapunov", {})
    ly_n = _num(ly.get("n", 200), "n", failer("lyapunov", "n"), lo=1, integer=True)

    sm = raw.get("supermartingale", {})
    cps = _vec(sm.get("checkpoints", [0.5, 1.0, 2.0, 5.0]), "checkpoints", failer("supermartingale", "checkpoints"))
    if min(cps) < 0:
        failer("supermartingale", "checkpoints")("checkpoints must be >= 0")
    sm_n = _num(sm.get("n_paths", 2000), "n_paths", failer("supermartingale", "n_paths"), lo=1, integer=True)
    sm_i = sm.get("inner_index")
    if sm_i is not None:
        sm_i = _num(sm_i, "inner_index", failer("supermartingale", "inner_index"), lo=1, integer=True)

    cl = raw.get("closure", {})
    fr = _vec(cl.get("depth_fractions", [0.5, 0.25, 0.125]), "depth_fractions", failer("closure", "depth_fractions"))
    if not all(0 < f < 1 for f in fr):
        failer("closure", "depth_fractions")("depth_fractions must lie in (0, 1)")
    cl_n = _num(cl.get("n_paths", 1000), "n_paths", failer("closure", "n_paths"), lo=1, integer=True)

    ito = None
    if "ito_verify" in checks or "ito_verify" in raw:
        it = need("ito_verify")
        fail = failer("ito_verify", "functional")
        fspec = get(it, "ito_verify", "functional")
        if isinstance(fspec, str):
            fspec = {"name": fspec}
        if not isinstance(fspec, dict) or fspec.get("name") not in FUNCTIONAL_CATALOG:
            fail(f"functional must name one of {', '.join(sorted(FUNCTIONAL_CATALOG))}")
        if fspec["name"] not in LADDER_FUNCTIONALS:
            fail(f"ito_verify supports {', '.join(LADDER_FUNCTIONALS)}, got {fspec['name']!r}")
        dts = _vec(get(it, "ito_verify", "dts"), "dts", failer("ito_verify", "dts"))
        if len(dts) < 3:
            failer("ito_verify", "dts")(f"the dt ladder must have at least 3 rungs, got {len(dts)}")
        if min(dts) <= 0:
            failer("ito_verify", "dts")("dts must be positive")
        n_seeds = _num(it.get("n_seeds", 64), "n_seeds", failer("ito_verify", "n_seeds"), lo=2, integer=True)
        ih = _num(it.get("horizon", 1.0), "horizon", failer("ito_verify", "horizon"), lo=0, strict_lo=True)
        if max(dts) > ih:
            failer("ito_verify", "dts")(f"largest dt exceeds the horizon {ih}")
        st = _vec(it.get("start", [0.0] * dim), "start", failer("ito_verify", "start"), n=dim)
        ito = ItoSpec(dict(fspec), dts, n_seeds, ih, st)

    out = raw.get("output", {})
    out_dir = out.get("dir")
    if out_dir is not None and not isinstance(out_dir, str):
        failer("output", "dir")("dir must be a string")

    return ExperimentConfig(
        domain=dict(dom), drift=terms["drift"], sigma=terms["sigma"], dim=dim, dt=dt, horizons=horizons,
        n_paths=n_paths, seed=seed, start=start, checks=tuple(checks), tol_generator=tol_g,
        tol_tangency=tol_t, boundary_times=btimes, n_per_time=n_per, lyapunov_n=ly_n,
        sm_checkpoints=cps, sm_n_paths=sm_n, sm_inner_index=sm_i,
        closure_depth_fractions=fr, closure_n_paths=cl_n, ito=ito, out_dir=out_dir, raw=raw,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(p)) from None
    return parse_config(text, str(p))
