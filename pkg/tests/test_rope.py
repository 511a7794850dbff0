import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moemla.exceptions import ConfigurationError
from moemla.rope import RopeTable, rope_apply, rope_extend
from moemla.tensor import Tensor

from conftest import gradcheck


def rot(v, m, table):
    return rope_apply(Tensor(np.asarray(v, np.float64)[None, :]), [m], table).data[0]


@pytest.fixture(scope="module")
def table():
    return RopeTable.build(16, 512)


def test_table_unit_circle(table):
    np.testing.assert_allclose(table.cos**2 + table.sin**2, 1.0, atol=1e-6)
    # angle(m, j) = m * base^(-2j/d_k)
    assert table.cos[3, 1] == pytest.approx(np.cos(3 * 10000 ** (-2 / 16)))


def test_position_zero_is_identity(table, rng):
    x = rng.normal(size=(5, 16))
    out = rope_apply(Tensor(x), np.zeros(5, dtype=int), table)
    np.testing.assert_array_equal(out.data, x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 511), st.integers(0, 2**31 - 1))
def test_norm_preserved(m, seed):
    table = RopeTable.build(16, 512)
    x = np.random.default_rng(seed).normal(size=16)
    assert np.linalg.norm(rot(x, m, table)) == pytest.approx(np.linalg.norm(x), abs=1e-5)


def test_relative_position_identity(table):
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        q, k = r.normal(size=16), r.normal(size=16)
        m, n = r.integers(0, 257, size=2)
        lhs = rot(q, m, table) @ rot(k, n, table)
        rhs = q @ rot(k, n - m, table)
        worst = max(worst, abs(lhs - rhs))
    assert worst < 1e-5


def test_inverse_rotation(table, rng):
    x = rng.normal(size=(4, 16))
    pos = np.array([0, 5, 100, 300])
    back = rope_apply(rope_apply(Tensor(x), pos, table), -pos, table)
    np.testing.assert_allclose(back.data, x, atol=1e-6)


def test_consecutive_pairs_rotate(table):
    x = np.zeros(16)
    x[0] = 1.0
    out = rot(x, 1, table)
    np.testing.assert_allclose(out[:2], [np.cos(1.0), np.sin(1.0)])
    np.testing.assert_array_equal(out[2:], 0.0)


def test_odd_dim_and_range_errors(table):
    with pytest.raises(ConfigurationError):
        RopeTable.build(7, 16)
    with pytest.raises(ConfigurationError):
        rope_apply(Tensor(np.ones((1, 16))), [512], table)
    with pytest.raises(ConfigurationError):
        rope_apply(Tensor(np.ones((1, 8))), [0], table)


class TestExtend:
    def test_prefix_bit_identical(self):
        small = RopeTable.build(16, 128)
        big = rope_extend(small, 256)
        assert big.max_positions == 256
        np.testing.assert_array_equal(big.cos[100], small.cos[100])
        np.testing.assert_array_equal(big.sin[:128], small.sin)

    def test_matches_direct_build(self):
        big = rope_extend(RopeTable.build(16, 128), 256)
        np.testing.assert_array_equal(big.cos, RopeTable.build(16, 256).cos)

    def test_norm_after_extend(self, rng):
        big = rope_extend(RopeTable.build(16, 128), 256)
        x = rng.normal(size=16)
        assert np.linalg.norm(rot(x, 200, big)) == pytest.approx(np.linalg.norm(x), abs=1e-5)

    def test_relative_identity_across_boundary(self, rng):
        big = rope_extend(RopeTable.build(16, 128), 256)
        q, k = rng.normal(size=16), rng.normal(size=16)
        lhs = rot(q, 120, big) @ rot(k, 140, big)
        assert lhs == pytest.approx(q @ rot(k, 20, big), abs=1e-5)

    def test_must_grow(self):
        with pytest.raises(ConfigurationError):
            rope_extend(RopeTable.build(16, 128), 64)


def test_rope_gradient(table):
    r = np.random.default_rng(0)
    w = Tensor(r.normal(size=(2, 3, 16)))
    pos = np.array([1, 7, 40])
    assert gradcheck(lambda x: (rope_apply(x, pos, table) * w).sum(), [r.normal(size=(2, 3, 16))]) < 1e-4
