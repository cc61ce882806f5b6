import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strategies import step_paths
from viab.domains import BallDomain
from viab.functional_calculus import (
    ContractError,
    FdScheme,
    NumericError,
    PathFunctional,
    derivatives,
    endpoint_affine,
    endpoint_function,
    endpoint_quadratic,
    generator_apply,
    horizontal_derivative,
    is_predictable,
    ito_residual,
    ladder_decreasing,
    neg_oriented_distance,
    path_integral,
    qv_weighted_endpoint,
    residual_ladder,
    running_sup,
    vertical_gradient,
    vertical_hessian,
)
from viab.paths import CadlagPath, PathPair, from_samples, with_endpoint
from viab.sde import SimConfig, coefficients_from_spec, simulate


def pair(samples, t_end=None):
    return PathPair.with_zero_v(from_samples(samples, t_end=t_end))


def test_scheme_validation():
    with pytest.raises(ValueError):
        FdScheme(h_min=1e-2, h_max=1e-4)
    with pytest.raises(ValueError):
        FdScheme(bump_size=0.0)
    with pytest.raises(ValueError):
        FdScheme(richardson_levels=0)


class TestHorizontal:
    def test_endpoint_is_flat(self):
        p = pair([(0, [1.0]), (0.5, [2.0])])
        assert horizontal_derivative(endpoint_affine([3.0]), p) == 0.0

    def test_path_integral_picks_up_endpoint(self):
        p = pair([(0, [0.5]), (0.3, [-1.0]), (0.7, [2.0])])
        assert horizontal_derivative(path_integral(), p) == pytest.approx(2.0, abs=1e-8)

    def test_time_dependent_endpoint(self):
        F = endpoint_function(lambda t, y: t * y[0])
        p = pair([(0, [0.0]), (1.0, [1.7])])
        assert horizontal_derivative(F, p) == pytest.approx(1.7, rel=1e-6)

    def test_non_finite_reports_step(self):
        F = endpoint_function(lambda t, y: math.inf if t > 1.0 else 0.0)
        p = pair([(0, [0.0]), (1.0, [1.0])])
        with pytest.raises(NumericError, match=r"step 0\.0002"):
            horizontal_derivative(F, p)


class TestVertical:
    def test_gradient_of_square_norm(self):
        p = pair([(0, [0.0, 0.0]), (1.0, [1.0, -2.0])])
        np.testing.assert_allclose(vertical_gradient(endpoint_quadratic(), p), [2.0, -4.0], atol=1e-8)

    def test_integral_ignores_final_instant(self):
        p = pair([(0, [0.2, 0.1]), (0.4, [1.0, -2.0])], t_end=1.0)
        np.testing.assert_array_equal(vertical_gradient(path_integral(), p), [0.0, 0.0])

    def test_affine_gradient(self):
        a = np.array([0.3, -1.1, 2.0])
        p = pair([(0, [1.0, 2.0, 3.0])], t_end=0.5)
        np.testing.assert_allclose(vertical_gradient(endpoint_affine(a, 4.0), p), a, rtol=1e-9)

    def test_hessians(self):
        p = pair([(0, [0.0, 0.0]), (1.0, [0.7, -0.4])])
        np.testing.assert_allclose(vertical_hessian(endpoint_quadratic(), p), 2 * np.eye(2), atol=1e-6)
        cross = endpoint_function(lambda t, y: y[0] * y[1])
        np.testing.assert_allclose(vertical_hessian(cross, p), [[0, 1], [1, 0]], atol=1e-6)
        np.testing.assert_allclose(vertical_hessian(endpoint_affine([1.0, 2.0]), p), 0.0, atol=1e-6)

    def test_hessian_is_symmetric(self):
        F = endpoint_function(lambda t, y: math.sin(y[0]) * y[1] ** 3 + y[0] * y[1])
        p = pair([(0, [0.0, 0.0]), (1.0, [0.3, 1.2])])
        d = derivatives(F, p)
        np.testing.assert_array_equal(d.hessian, d.hessian.T)


def neg_b_oracle(x, lam, c):
    # L(-b) for the unit disk with mu = -lam x, sigma = c rot90(x), at radius r:
    # <x/r, -lam x> + (c^2/2) r^2 <rot u, (I - u u^T)/r rot u> = -lam r + c^2 r / 2
    r = float(np.linalg.norm(x))
    return -lam * r + 0.5 * c * c * r


class TestGenerator:
    def test_affine_with_constant_drift(self):
        coeffs = coefficients_from_spec({"name": "constant_drift", "m": [0.5, -1.5]}, {"name": "iso_sigma", "c": 2.0})
        x = from_samples([(0, [0.1, 0.2]), (0.3, [0.4, 0.0])])
        a = np.array([2.0, 1.0])
        assert generator_apply(endpoint_affine(a), x, coeffs) == pytest.approx(a @ [0.5, -1.5], abs=1e-8)

    def test_constant_functional(self):
        coeffs = coefficients_from_spec({"name": "linear_drift", "lambda": 1.0}, {"name": "iso_sigma", "c": 1.0})
        x = from_samples([(0, [0.1, 0.2])], t_end=0.4)
        assert generator_apply(PathFunctional(lambda p: 3.0), x, coeffs) == 0.0

    @pytest.mark.parametrize("lam,c", [(1.0, 1.0), (0.25, 1.0), (0.5, 1.0), (2.0, 0.3)])
    def test_neg_distance_on_disk_boundary(self, lam, c):
        D = BallDomain([0.0, 0.0], 1.0)
        coeffs = coefficients_from_spec({"name": "linear_drift", "lambda": lam}, {"name": "rot_tangent_sigma", "c": c})
        F = neg_oriented_distance(D)
        for th in np.linspace(0.1, 2 * np.pi, 7):
            x = np.array([np.cos(th), np.sin(th)])
            path = from_samples([(0, 0.5 * x), (0.2, x)])
            assert generator_apply(F, path, coeffs) == pytest.approx(c * c / 2 - lam, abs=1e-6)

    def test_neg_distance_inside_tube(self):
        D = BallDomain([0.0, 0.0], 1.0)
        coeffs = coefficients_from_spec({"name": "linear_drift", "lambda": 1.0}, {"name": "rot_tangent_sigma", "c": 1.0})
        rng = np.random.default_rng(3)
        for x in D.sample_tube(rng, 20):
            value = generator_apply(neg_oriented_distance(D), CadlagPath.constant(x, t_end=0.1), coeffs)
            assert value == pytest.approx(neg_b_oracle(x, 1.0, 1.0), abs=1e-6)


@given(
    st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.floats(0.1, 2.0),
    st.floats(-2.0, 2.0),
)
def test_polynomial_endpoint_derivatives(ct, cy, t, y):
    # f(t, y) = sum_i ct_i t^i + y (cy0 + cy1 y + cy2 y^2) + t y
    def f(s, v):
        u = v[0]
        return sum(a * s**i for i, a in enumerate(ct)) + u * (cy[0] + cy[1] * u + cy[2] * u * u) + s * u

    dt = sum(i * a * t ** (i - 1) for i, a in enumerate(ct) if i) + y
    dy = cy[0] + 2 * cy[1] * y + 3 * cy[2] * y * y + t
    p = pair([(0, [0.0]), (t, [y])])
    F = endpoint_function(f)
    scale = 1 + abs(f(t, [y]))
    assert abs(horizontal_derivative(F, p) - dt) <= 1e-6 * max(abs(dt), scale)
    assert abs(vertical_gradient(F, p)[0] - dy) <= 1e-6 * max(abs(dy), scale)


@given(step_paths(dim=2))
def test_functionals_blind_to_final_instant(p):
    P = PathPair.with_zero_v(p)
    for F in (path_integral(), running_sup()):
        assert np.max(np.abs(vertical_gradient(F, P))) <= 1e-10


@given(step_paths(dim=2), st.floats(-5, 5))
def test_catalog_is_predictable(p, bump):
    v = CadlagPath(p.times, np.tile(np.eye(2).reshape(-1), (len(p.times), 1)))
    v = with_endpoint(v, v.endpoint + bump * np.eye(2).reshape(-1))
    P = PathPair(p, v)
    for F in (endpoint_affine([1.0, 2.0]), endpoint_quadratic(), path_integral(), running_sup(), qv_weighted_endpoint([1.0, -1.0])):
        assert F.predictable_in_v
        assert is_predictable(F, P)


class TestItoResidual:
    def test_identity_is_exact(self):
        coeffs = coefficients_from_spec("zero_drift", {"name": "iso_sigma", "c": 1.0}, dim=1)
        for seed, dt in [(0, 0.01), (1, 0.003), (7, 0.05)]:
            hist = from_samples([(0, [0.3]), (0.2, [-0.1])])
            traj = simulate(hist, coeffs, SimConfig(dt=dt, horizon=1.0, seed=seed))
            assert ito_residual(endpoint_affine([1.0]), traj, coeffs) == 0.0

    def test_missing_increments(self):
        coeffs = coefficients_from_spec("zero_drift", {"name": "iso_sigma", "c": 1.0}, dim=1)
        traj = simulate(CadlagPath.constant([0.0]), coeffs, SimConfig(dt=0.1, horizon=1.0, store_increments=False))
        with pytest.raises(ContractError):
            ito_residual(endpoint_affine([1.0]), traj, coeffs)

    def test_deterministic_rate_is_first_order(self):
        # sigma = 0: the residual is a Riemann-sum error, O(dt)
        coeffs = coefficients_from_spec({"name": "linear_drift", "lambda": 1.0}, "zero_sigma", dim=1)
        F = endpoint_function(lambda t, y: t * y[0] ** 2)
        res = []
        for dt in (0.02, 0.01, 0.005):
            traj = simulate(CadlagPath.constant([1.0]), coeffs, SimConfig(dt=dt, horizon=1.0))
            res.append(abs(ito_residual(F, traj, coeffs)))
        assert res[0] > res[1] > res[2]
        assert res[0] / res[1] == pytest.approx(2.0, rel=0.1)
        assert res[1] / res[2] == pytest.approx(2.0, rel=0.1)

    def test_small_ladder_decreases(self):
        coeffs = coefficients_from_spec("zero_drift", {"name": "iso_sigma", "c": 1.0})
        rungs = residual_ladder(endpoint_quadratic(), coeffs, CadlagPath.constant([0.0, 0.0]), [0.02, 0.01, 0.005], 32, 0.5)
        assert [r.dt for r in rungs] == [0.02, 0.01, 0.005]
        assert rungs[0].rms > rungs[1].rms > rungs[2].rms
        assert ladder_decreasing(rungs)

    def test_ladder_rejects_incommensurate_dts(self):
        coeffs = coefficients_from_spec("zero_drift", {"name": "iso_sigma", "c": 1.0})
        with pytest.raises(ContractError):
            residual_ladder(endpoint_quadratic(), coeffs, CadlagPath.constant([0.0, 0.0]), [0.03, 0.02], 2, 0.6)
