import math

import numpy as np
import pytest

from recgrela.errors import BoundsError, ContractError
from recgrela.numerics import Tape, Tensor, finite_diff_grad, make_rng, tsum
from recgrela.positional import (
    LearnablePositionTable,
    RopeTable,
    ape_encode,
    ape_table,
    lpe_add,
    rope_apply,
)


def rope_complex_oracle(x, table, offset=0):
    """Independent rotation oracle through complex arithmetic."""
    xc = x[..., 0::2] + 1j * x[..., 1::2]
    n = x.shape[-2]
    phase = np.exp(1j * table.angles[offset:offset + n])
    rotated = xc * phase
    out = np.empty_like(x)
    out[..., 0::2] = rotated.real
    out[..., 1::2] = rotated.imag
    return out


def test_ape_analytic_slots():
    assert ape_encode(0, 0, 8) == 0.0          # sin 0
    assert ape_encode(0, 1, 8) == 1.0          # cos 0
    assert abs(ape_encode(1, 0, 8) - math.sin(1.0)) < 1e-15
    with pytest.raises(BoundsError):
        ape_encode(0, 8, 8)


def test_ape_table_matches_scalar_and_is_deterministic():
    t1 = ape_table(12, 6)
    t2 = ape_table(12, 6)
    assert np.array_equal(t1, t2)  # bitwise identical regeneration
    for p in (0, 3, 11):
        for j in range(6):
            assert t1[p, j] == ape_encode(p, j, 6)


def test_lpe_add_identities_and_grad():
    rng = make_rng(0)
    x = Tensor(rng.normal(size=(4, 3)))
    zero = LearnablePositionTable(8, 3)
    np.testing.assert_array_equal(lpe_add(x, zero).data, x.data)

    table = LearnablePositionTable(8, 3, init=rng.normal(size=(8, 3)))
    out = lpe_add(Tensor(np.zeros((5, 3))), table)
    np.testing.assert_array_equal(out.data, table.table.data[:5])

    with Tape() as tape:
        y = lpe_add(Tensor(rng.normal(size=(5, 3))), table)
        tape.backward(tsum(y))
    np.testing.assert_array_equal(table.table.grad[:5], np.ones((5, 3)))
    np.testing.assert_array_equal(table.table.grad[5:], np.zeros((3, 3)))

    with pytest.raises(BoundsError):
        lpe_add(Tensor(np.zeros((9, 3))), table)


def test_rope_table_frequency_convention():
    table = RopeTable(16, 8)
    t = np.arange(4)
    np.testing.assert_allclose(table.theta, 10000.0 ** (-2.0 * t / 8))
    np.testing.assert_allclose(table.angles[5], 5 * table.theta)
    with pytest.raises(ContractError):
        RopeTable(16, 7)


def test_rope_position_zero_is_identity():
    rng = make_rng(1)
    x = Tensor(rng.normal(size=(1, 6)))
    out = rope_apply(x, RopeTable(4, 6))
    np.testing.assert_array_equal(out.data, x.data)


def test_rope_unit_rotation_analytic():
    # d=2, theta_0 = 1, position 1: (1, 0) -> (cos 1, sin 1)
    table = RopeTable(4, 2)
    out = rope_apply(Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])), table)
    np.testing.assert_allclose(out.data[1], [math.cos(1.0), math.sin(1.0)],
                               atol=1e-15)


def test_rope_inner_product_frozen_value():
    # q = k = (1, 0), positions 2 and 5, theta = 0.5:
    # <R2 q, R5 k> = Re(q* k e^{i(5-2)*0.5}) = cos(1.5) = 0.0707372016677029
    table = RopeTable(8, 2)
    table.theta = np.array([0.5])
    table.angles = np.arange(8)[:, None] * table.theta
    table.cos = np.cos(table.angles)
    table.sin = np.sin(table.angles)
    x = np.zeros((8, 2))
    x[:, 0] = 1.0
    rot = rope_apply(Tensor(x), table).data
    got = float(rot[2] @ rot[5])
    assert abs(got - 0.0707372016677029) < 1e-12


def test_rope_matches_complex_oracle():
    rng = make_rng(7)
    for d in (2, 8, 64):
        table = RopeTable(128, d)
        x = rng.normal(size=(2, 16, d))
        got = rope_apply(Tensor(x), table, position_offset=3).data
        want = rope_complex_oracle(x, table, offset=3)
        assert np.max(np.abs(got - want)) < 1e-12


def test_rope_norm_preservation():
    rng = make_rng(3)
    table = RopeTable(64, 16)
    x = rng.normal(size=(64, 16))
    out = rope_apply(Tensor(x), table).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1),
                               np.linalg.norm(x, axis=-1), atol=1e-12)


def test_rope_translation_equivariance():
    """Pairwise scores depend only on the relative offset m - n."""
    rng = make_rng(11)
    for d in (2, 8, 64):
        table = RopeTable(512, d)
        for _ in range(100):
            q = rng.normal(size=(1, d))
            k = rng.normal(size=(1, d))
            m, n = rng.integers(0, 400, size=2)
            t = int(rng.choice([1, 5, 50]))
            qm = rope_apply(Tensor(q), table, position_offset=int(m)).data[0]
            kn = rope_apply(Tensor(k), table, position_offset=int(n)).data[0]
            qmt = rope_apply(Tensor(q), table, position_offset=int(m) + t).data[0]
            knt = rope_apply(Tensor(k), table, position_offset=int(n) + t).data[0]
            assert abs(qm @ kn - qmt @ knt) <= 1e-9


def test_rope_gradient_is_inverse_rotation():
    rng = make_rng(5)
    table = RopeTable(32, 6)
    xdata = rng.normal(size=(4, 6))
    x = Tensor(xdata, requires_grad=True)

    def fn(t):
        y = rope_apply(t, table, position_offset=2)
        return tsum(y * y * Tensor(np.arange(24.0).reshape(4, 6)))

    with Tape() as tape:
        tape.backward(fn(x))
    num = finite_diff_grad(fn, Tensor(xdata), h=1e-6)
    assert np.max(np.abs(x.grad - num)) < 1e-7


def test_rope_bounds():
    table = RopeTable(8, 4)
    with pytest.raises(BoundsError):
        rope_apply(Tensor(np.zeros((6, 4))), table, position_offset=3)
    with pytest.raises(ContractError):
        rope_apply(Tensor(np.zeros((2, 6))), table)
