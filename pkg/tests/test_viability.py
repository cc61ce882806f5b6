import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from viab.domains import Barrier, BallDomain, EllipsoidDomain, inner_domain
from viab.paths import CadlagPath
from viab.sde import PathCoefficients, SimConfig, coefficients_from_spec, path_rng
from viab.viability import (
    CONSISTENT,
    FAIL,
    INCONCLUSIVE,
    PASS,
    BoundaryPathSampler,
    RoundtripProtocol,
    approximating_history,
    check_condition_ii,
    estimate_closure_exit_probability,
    estimate_exit_probability,
    exit_stats,
    interior_history,
    lyapunov_scan,
    lyapunov_value,
    sample_boundary_paths,
    sample_is_valid,
    smallest_inner_index,
    supermartingale_check,
    theorem_roundtrip,
    tube_levels,
    wilson_interval,
)

DISK = BallDomain([0.0, 0.0], 1.0)
ELLIPSE = EllipsoidDomain([0.0, 0.0], [2.0, 1.0])


def tangent(lam=1.0, c=1.0, sigma="rot_tangent_sigma"):
    return coefficients_from_spec({"name": "linear_drift", "lambda": lam}, {"name": sigma, "c": c})


def iso(c=1.0, drift="zero_drift"):
    return coefficients_from_spec(drift, {"name": "iso_sigma", "c": c})


ZERO = coefficients_from_spec("zero_drift", "zero_sigma")


class TestSampler:
    def test_single_instant_paths(self):
        samples = sample_boundary_paths(DISK, tangent(), 0.0, 4, seed=1)
        assert len(samples) == 4
        for s in samples:
            assert len(s.path) == 1 and s.t == 0.0
            assert abs(np.linalg.norm(s.path.endpoint) - 1.0) <= 1e-10

    @pytest.mark.parametrize("D", [DISK, ELLIPSE], ids=["disk", "ellipse"])
    @pytest.mark.parametrize("coeffs", [tangent(), iso(2.0), tangent(3.0, 1.0, "path_scaled_rot_sigma")], ids=["rot", "iso", "scaled"])
    def test_invariants_hold(self, D, coeffs):
        for t in (0.0, 0.3, 1.0):
            for s in sample_boundary_paths(D, coeffs, t, 30, seed=2):
                assert s.path.t_end == t
                assert sample_is_valid(D, s)

    def test_deterministic(self):
        a = sample_boundary_paths(DISK, iso(), 0.5, 10, seed=3)
        b = sample_boundary_paths(DISK, iso(), 0.5, 10, seed=3)
        c = sample_boundary_paths(DISK, iso(), 0.5, 10, seed=4)
        assert all(np.array_equal(x.path.values, y.path.values) for x, y in zip(a, b))
        assert not all(np.array_equal(x.path.values, y.path.values) for x, y in zip(a, c))

    def test_coverage_report(self):
        sampler = BoundaryPathSampler()
        sampler.sample(DISK, iso(), 1.0, 9, seed=0)
        cov = sampler.coverage[1.0]
        assert cov["n"] == 9 and cov["projected"] + cov["uniform_boundary"] == 9

    def test_interior_history_respects_margin(self):
        rng = path_rng(0, 0)
        times, vals = interior_history(DISK, iso(5.0), rng, 1.0, 40, 0.01, 2.0)
        assert times[0] == 0.0 and times[-1] < 1.0
        assert np.all(np.asarray(DISK.b(vals)) >= 0.01 - 1e-12)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            sample_boundary_paths(DISK, iso(), -1.0, 3, seed=0)


class TestConditionII:
    def test_viable_disk(self):
        rep = check_condition_ii(DISK, tangent(), n_per_time=50, seed=1)
        assert rep.verdict == PASS and rep.passed
        assert rep.worst_tangency <= 1e-10
        for r in rep.records:
            assert r["generator_value"] == pytest.approx(-0.5, abs=1e-8)
        assert rep.margin == pytest.approx(0.5, abs=1e-8)
        assert not rep.borderline

    def test_weak_drift_fails(self):
        rep = check_condition_ii(DISK, tangent(0.25), n_per_time=30)
        assert rep.verdict == FAIL
        assert rep.worst_generator == pytest.approx(0.25, abs=1e-8)
        assert rep.margin == pytest.approx(-0.25, abs=1e-8)
        assert rep.worst_offenders[0]["generator_value"] == pytest.approx(0.25, abs=1e-8)

    @pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
    def test_isotropic_noise_is_not_tangent(self, c):
        rep = check_condition_ii(DISK, iso(c), n_per_time=20)
        assert rep.verdict == FAIL
        for r in rep.records:
            assert r["tangency_residual"] == pytest.approx(c, abs=1e-10)

    def test_borderline(self):
        rep = check_condition_ii(DISK, tangent(0.5, 1.0), n_per_time=20)
        assert rep.borderline
        assert abs(rep.worst_generator) <= 1e-12

    def test_cross_check_with_finite_differences(self):
        rep = check_condition_ii(DISK, tangent(0.7, 0.9, "path_scaled_rot_sigma"), n_per_time=10, cross_check=True)
        assert rep.cross_check_max_diff is not None and rep.cross_check_max_diff <= 1e-6

    def test_ellipse_rotation_is_not_tangent(self):
        rep = check_condition_ii(ELLIPSE, tangent(1.0, 0.5), n_per_time=20)
        assert rep.worst_tangency > 1e-3 and rep.verdict == FAIL

    def test_report_dict(self):
        d = check_condition_ii(DISK, tangent(), n_per_time=5).to_dict()
        assert d["verdict"] == PASS and d["n_samples"] == 15 and "records" not in d


@given(st.floats(0.0, 3.0), st.floats(-2.0, 2.0), st.integers(0, 1000))
def test_rotational_noise_always_tangent(lam, c, seed):
    for sigma in ("rot_tangent_sigma", "path_scaled_rot_sigma"):
        rep = check_condition_ii(DISK, tangent(lam, c, sigma), times=(0.0, 0.7), n_per_time=5, seed=seed)
        assert rep.worst_tangency <= 1e-10


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
def test_verdict_ignores_history_for_endpoint_coefficients(s1, s2, lam):
    a = check_condition_ii(DISK, tangent(lam), times=(0.5,), n_per_time=8, seed=s1)
    b = check_condition_ii(DISK, tangent(lam), times=(0.5,), n_per_time=8, seed=s2)
    assert a.verdict == b.verdict


class TestExitStatistics:
    def test_wilson_against_closed_form(self):
        z = 1.959963984540054
        for k, n in [(0, 10_000), (3, 50), (50, 50), (17, 400)]:
            p = k / n
            centre = (p + z * z / (2 * n)) / (1 + z * z / n)
            half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
            lo, hi = wilson_interval(k, n)
            assert lo == pytest.approx(max(centre - half, 0.0), abs=1e-12)
            assert hi == pytest.approx(min(centre + half, 1.0), abs=1e-12)
        assert wilson_interval(0, 10_000)[1] <= 5e-4

    @given(st.lists(st.one_of(st.floats(0.0, 5.0), st.just(math.inf)), min_size=1, max_size=200), st.floats(0.5, 5.0))
    def test_stats_invariants(self, tau, horizon):
        s = exit_stats(np.array(tau), horizon, 0.0)
        assert 0 <= s.p_hat <= 1
        assert s.ci_low <= s.p_hat <= s.ci_high
        assert sum(s.histogram_counts) == s.n_exited

    def test_inward_drift_never_exits(self):
        c = coefficients_from_spec({"name": "linear_drift", "lambda": 2.0}, "zero_sigma")
        hists = [CadlagPath.constant(x) for x in DISK.sample_interior(np.random.default_rng(0), 50)]
        (s,) = estimate_exit_probability(DISK, c, hists, SimConfig(dt=1e-2, horizon=5.0, n_paths=50))
        assert s.n_exited == 0 and s.p_hat == 0.0

    def test_isotropic_noise_exits(self):
        stats = estimate_exit_probability(
            DISK, iso(), CadlagPath.constant([0.5, 0.0]), SimConfig(dt=1e-3, horizon=5.0, seed=1, n_paths=500),
            horizons=(0.1, 1.0, 5.0),
        )
        assert [s.horizon for s in stats] == [0.1, 1.0, 5.0]
        assert stats[0].p_hat <= stats[1].p_hat <= stats[2].p_hat
        assert stats[-1].p_hat >= 0.9
        assert stats[-1].mean_exit_time == pytest.approx(0.375, rel=0.15)

    def test_exit_probability_grows_with_noise(self):
        # the same seed gives every c the same normal stream
        cfg = SimConfig(dt=1e-3, horizon=0.5, seed=7, n_paths=1000)
        p = [estimate_exit_probability(DISK, iso(c), CadlagPath.constant([0.5, 0.0]), cfg)[0].p_hat for c in (0.25, 0.5, 1.0)]
        assert p[0] <= p[1] <= p[2]
        assert p[2] > p[0]

    def test_viable_disk_interior_and_closure(self):
        cfg = SimConfig(dt=1e-3, horizon=1.0, seed=2, n_paths=300)
        (s,) = estimate_exit_probability(DISK, tangent(), CadlagPath.constant([0.5, 0.0]), cfg)
        assert s.n_exited == 0
        bs = sample_boundary_paths(DISK, tangent(), 0.5, 20, seed=3)
        closure = estimate_closure_exit_probability(DISK, tangent(), bs, cfg, depths=(0.1, 0.05))
        assert [c.level for c in closure] == [0.1, 0.05]
        assert all(c.n_exited == 0 and c.mode == "closure" for c in closure)

    def test_approximating_history_moves_inward(self):
        s = sample_boundary_paths(DISK, iso(), 0.5, 1, seed=0)[0]
        h = approximating_history(DISK, s.path, 0.01)
        assert DISK.b(h.endpoint) == pytest.approx(0.01, abs=1e-12)
        np.testing.assert_array_equal(h.values[:-1], s.path.values[:-1])


class TestLyapunov:
    barrier = Barrier(DISK)

    def test_levels(self):
        assert tube_levels(DISK) == [0.25, 0.0625, 0.015625, 0.00390625]

    def test_viable_disk_is_bounded(self):
        rep = lyapunov_scan(DISK, self.barrier, tangent(), n=50)
        assert math.isfinite(rep.M_hat)
        assert not rep.divergence
        for lv in rep.levels:
            if lv["kind"] == "tube":
                # tangency removes the 1/b^2 term; -(1/b) L b = -(lambda - c^2/2) r / b
                b = lv["b"]
                assert lv["max"] == pytest.approx(-0.5 * (1 - b) / b, rel=1e-9)
        assert rep.M_hat <= 0.0

    def test_isotropic_noise_diverges(self):
        rep = lyapunov_scan(DISK, self.barrier, iso(), n=20)
        assert rep.divergence
        for lv in rep.levels:
            if lv["kind"] == "tube":
                b = lv["b"]
                # |sigma^T grad b|^2 / b^2 plus the curvature term 1 / (2 b r)
                assert lv["max"] == pytest.approx(1 / b**2 + 1 / (2 * b * (1 - b)), rel=1e-9)

    def test_zero_coefficients(self):
        rep = lyapunov_scan(DISK, self.barrier, ZERO, n=20)
        assert rep.M_hat == 0.0 and not rep.divergence

    def test_value_matches_barrier_formula(self):
        c = tangent(0.3, 1.3, "path_scaled_rot_sigma")
        x = np.array([0.0, 0.9])
        p = CadlagPath([0.0, 0.5], [[0.2, 0.1], x])
        g, psi, gpsi, hpsi = self.barrier.values(x)
        mu, sig = c.mu(p), c.sigma(p)
        expected = gpsi @ mu + 0.5 * np.sum(hpsi * (sig @ sig.T))
        assert lyapunov_value(self.barrier, c, p) == pytest.approx(expected, rel=1e-12)


class TestSupermartingale:
    barrier = Barrier(DISK)
    i = smallest_inner_index(DISK, 0.25)

    def test_inner_index(self):
        assert self.i == 8
        assert 1 / self.i <= DISK.tube_width / 4
        assert inner_domain(DISK, self.i).b([0.0, 0.0]) == pytest.approx(1 - 1 / 8)

    def test_frozen_process(self):
        rep = supermartingale_check(
            DISK, self.barrier, ZERO, CadlagPath.constant([0.8, 0.0]), SimConfig(dt=1e-2, horizon=2.0, n_paths=10),
            self.i, (0.5, 1.0, 2.0), M_hat=0.0,
        )
        assert rep.slacks == [0.0, 0.0, 0.0] and rep.holds

    def test_inward_drift_strict(self):
        c = coefficients_from_spec({"name": "linear_drift", "lambda": 1.0}, "zero_sigma")
        rep = supermartingale_check(
            DISK, self.barrier, c, CadlagPath.constant([0.8, 0.0]), SimConfig(dt=1e-3, horizon=2.0, n_paths=5),
            self.i, (0.5, 1.0, 2.0),
        )
        assert rep.holds
        assert all(s < 0 for s in rep.slacks)
        # deterministic radius 0.8 e^{-s}
        for s, m in zip(rep.checkpoints, rep.means):
            assert m == pytest.approx(self.barrier.psi([0.8 * math.exp(-s), 0.0]), rel=1e-3)

    def test_viable_disk(self):
        rep = supermartingale_check(
            DISK, self.barrier, tangent(), CadlagPath.constant([0.8, 0.0]),
            SimConfig(dt=1e-3, horizon=2.0, seed=5, n_paths=500), self.i, (0.5, 1.0, 2.0),
        )
        assert rep.holds

    def test_start_must_be_inside_level_set(self):
        with pytest.raises(ValueError):
            supermartingale_check(DISK, self.barrier, ZERO, CadlagPath.constant([0.95, 0.0]),
                                  SimConfig(dt=1e-2, horizon=1.0), self.i, (0.5,), M_hat=0.0)


SMALL = dict(n_per_time=20, horizons=(1.0, 2.0), n_paths=300, n_closure_paths=100, lyapunov_n=30,
             checkpoints=(0.5, 1.0), n_supermartingale_paths=200, start=(0.5, 0.0), dt=2e-3)


class TestRoundtrip:
    def test_viable(self):
        res = theorem_roundtrip(DISK, tangent(), RoundtripProtocol(**SMALL))
        assert res.verdict == CONSISTENT
        verdict, p_hat, bounded = res.triple
        assert verdict == PASS and p_hat == 0.0 and bounded
        doc = res.to_dict()
        assert set(doc) == {"condition_ii", "exit", "lyapunov", "verdict", "diagnostics"}
        assert doc["lyapunov"]["supermartingale"]["holds"]

    def test_isotropic(self):
        res = theorem_roundtrip(DISK, iso(), RoundtripProtocol(**SMALL))
        assert res.verdict == CONSISTENT
        verdict, p_hat, bounded = res.triple
        assert verdict == FAIL and p_hat >= 0.9 and not bounded

    def test_borderline(self):
        res = theorem_roundtrip(DISK, tangent(0.5, 1.0), RoundtripProtocol(**SMALL))
        assert res.verdict == INCONCLUSIVE
        assert any("borderline" in d for d in res.diagnostics)

    def test_custom_coefficients(self):
        # a non-catalog tangent field still runs through the exact simulation route
        base = tangent()
        c = PathCoefficients(mu=base.mu, sigma=base.sigma, dim=2, brownian_dim=1)
        small = dict(SMALL, n_paths=20, n_closure_paths=10, n_supermartingale_paths=10, horizons=(0.2,), checkpoints=(0.2,))
        res = theorem_roundtrip(DISK, c, RoundtripProtocol(**small))
        assert res.verdict == CONSISTENT
