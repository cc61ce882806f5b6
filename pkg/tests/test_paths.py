import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strategies import step_paths
from viab.paths import (
    CadlagPath,
    PathDomainError,
    PathPair,
    concat,
    d_infinity,
    equivalent,
    from_samples,
    horizontal_extend,
    left_limit_at,
    read_csv,
    restrict,
    sup_norm,
    value_at,
    vertical_bump,
    write_csv,
)


@pytest.fixture
def jump():
    return from_samples([(0, 1.0), (1, 3.0)], t_end=2.0)


def pair_of(x: CadlagPath, v_scale: float = 0.0) -> PathPair:
    n = x.dim
    v = CadlagPath(x.times, np.full((len(x.times), n * n), v_scale))
    return PathPair(x, v)


class TestEvaluation:
    def test_right_continuous(self, jump):
        assert value_at(jump, 0.5)[0] == 1.0
        assert value_at(jump, 1.0)[0] == 3.0
        assert value_at(jump, 2.0)[0] == 3.0

    def test_left_limit_at_jump(self, jump):
        assert left_limit_at(jump, 1.0)[0] == 1.0
        assert left_limit_at(jump, 0.0)[0] == 1.0

    def test_outside_domain(self, jump):
        with pytest.raises(PathDomainError):
            value_at(jump, 2.5)
        with pytest.raises(PathDomainError):
            value_at(jump, -0.1)

    def test_constructor_rejects_bad_grids(self):
        with pytest.raises(PathDomainError):
            CadlagPath([0.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with pytest.raises(PathDomainError):
            CadlagPath([0.5], [1.0])
        with pytest.raises(PathDomainError):
            CadlagPath([0.0, 1.0], [1.0])

    def test_paths_are_immutable(self, jump):
        with pytest.raises(ValueError):
            jump.values[0, 0] = 9.0


class TestOperations:
    def test_restrict_identity(self, jump):
        assert equivalent(restrict(jump, 2.0), jump)

    def test_restrict_carries_step_value(self):
        p = from_samples([(0, 1.0), (1, 3.0)], t_end=2.0)
        r = restrict(p, 0.5)
        assert r.t_end == 0.5
        np.testing.assert_array_equal(r.times, [0.0, 0.5])
        np.testing.assert_array_equal(r.values[:, 0], [1.0, 1.0])

    def test_restrict_past_end(self, jump):
        with pytest.raises(PathDomainError):
            restrict(jump, 3.0)

    def test_extend_holds_last_value(self):
        p = from_samples([(0, 1.0), (1, 3.0)])
        q = horizontal_extend(p, 0.5)
        assert q.t_end == 1.5
        assert value_at(q, 1.25)[0] == 3.0
        assert equivalent(horizontal_extend(p, 0.0), p)

    def test_extend_negative(self, jump):
        with pytest.raises(PathDomainError):
            horizontal_extend(jump, -0.1)

    def test_bump_only_moves_endpoint(self):
        p = from_samples([(0, 1.0), (1, 3.0)])
        q = vertical_bump(p, [0.5])
        assert q.endpoint[0] == 3.5
        assert value_at(q, 0.5)[0] == 1.0
        assert left_limit_at(q, 1.0)[0] == left_limit_at(p, 1.0)[0]
        assert equivalent(vertical_bump(p, [0.0]), p)

    def test_bump_dimension_mismatch(self, jump):
        with pytest.raises(PathDomainError):
            vertical_bump(jump, [1.0, 2.0])

    def test_concat_switches_at_head_end(self):
        head = CadlagPath.constant([5.0], t_end=1.0)
        tail = from_samples([(0, 0.0), (1, 7.0)], t_end=2.0)
        c = concat(head, tail)
        assert c.t_end == 2.0
        assert value_at(c, 0.5)[0] == 5.0
        assert value_at(c, 1.0)[0] == 7.0

    def test_concat_head_too_long(self, jump):
        with pytest.raises(PathDomainError):
            concat(jump, restrict(jump, 1.0))

    def test_sup_norm(self):
        assert sup_norm(CadlagPath.constant([3.0, 4.0], t_end=1.0)) == 5.0
        assert sup_norm(from_samples([(0, 1.0), (1, -2.0)])) == 2.0

    def test_d_infinity_examples(self):
        x = from_samples([(0, [0.0, 1.0]), (0.5, [1.0, -1.0])], t_end=1.0)
        a = pair_of(x, 0.2)
        assert d_infinity(a, a) == 0.0
        assert d_infinity(a, a.extend(0.3)) == pytest.approx(0.3, abs=1e-15)
        zero = pair_of(CadlagPath.constant([0.0], t_end=1.0))
        one = pair_of(CadlagPath.constant([1.0], t_end=1.0))
        assert d_infinity(zero, one) == 1.0

    def test_d_infinity_rejects_longer_first(self, jump):
        a = pair_of(jump)
        with pytest.raises(PathDomainError):
            d_infinity(a.extend(1.0), a)

    def test_pair_requires_symmetric_v(self):
        x = CadlagPath.constant([0.0, 0.0], t_end=1.0)
        v = CadlagPath.constant([1.0, 2.0, 0.0, 1.0], t_end=1.0)
        with pytest.raises(PathDomainError):
            PathPair(x, v)

    def test_csv_roundtrip(self):
        p = from_samples([(0, [0.1, 1 / 3]), (0.7, [2.0, -1e-17])], t_end=1.3)
        buf = io.StringIO()
        write_csv(p, buf, header_comment="seed=1")
        back = read_csv(buf.getvalue())
        np.testing.assert_array_equal(back.times, p.times)
        np.testing.assert_array_equal(back.values, p.values)

    def test_csv_rejects_unsorted(self):
        with pytest.raises(PathDomainError):
            read_csv("time,c0\n0,1\n2,1\n1,0\n")


@given(step_paths(dim=2))
def test_left_limits_and_right_values_on_grid(p):
    for k, s in enumerate(p.times):
        np.testing.assert_array_equal(value_at(p, s), p.values[k])
        np.testing.assert_array_equal(left_limit_at(p, s), p.values[max(k - 1, 0)])


@given(step_paths(), st.floats(0.0, 2.0))
def test_restrict_undoes_extend(p, delta):
    assert equivalent(restrict(horizontal_extend(p, delta), p.t_end), p)


@given(step_paths(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_extensions_compose(p, a, b):
    lhs = horizontal_extend(horizontal_extend(p, a), b)
    rhs = horizontal_extend(p, a + b)
    # the end times may differ by an ulp
    assert abs(lhs.t_end - rhs.t_end) <= 1e-15 * (1 + rhs.t_end)
    grid = np.union1d(lhs.times[:-1], rhs.times[:-1])
    np.testing.assert_array_equal(lhs.values_at(grid), rhs.values_at(grid))
    np.testing.assert_array_equal(lhs.endpoint, rhs.endpoint)


@given(step_paths(t_end=2.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_restriction_composes(p, u, w):
    t1, t2 = sorted((2.0 * u, 2.0 * w))
    assert equivalent(restrict(restrict(p, t2), t1), restrict(p, t1))


@given(step_paths(t_end=2.0), st.floats(0.0, 2.0))
def test_concat_with_own_restriction(p, s):
    assert equivalent(concat(restrict(p, s), p), p)
    assert equivalent(concat(p, p), p)


@given(step_paths(t_end=1.0), step_paths(t_end=2.0), step_paths(t_end=3.0))
def test_concat_associative(a, b, c):
    assert equivalent(concat(concat(a, b), c), concat(a, concat(b, c)))


@given(step_paths(dim=2), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_bump_triangle_inequality(p, e):
    assert sup_norm(vertical_bump(p, e)) <= sup_norm(p) + np.linalg.norm(e) + 1e-12


@given(step_paths(t_end=1.0), step_paths(t_end=1.0), step_paths(t_end=1.0))
def test_d_infinity_is_a_metric(x, y, z):
    a, b, c = pair_of(x), pair_of(y, 1.0), pair_of(z, -0.5)
    assert d_infinity(a, b) == d_infinity(b, a)
    assert d_infinity(a, a) == 0.0
    if d_infinity(a, b) == 0.0:
        assert equivalent(x, y)
    assert d_infinity(a, c) <= d_infinity(a, b) + d_infinity(b, c) + 1e-12
