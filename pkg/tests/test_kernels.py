import numpy as np
import pytest

from oracles import (
    causal_conv_sliding,
    dot_product_rowwise,
    linear_attention_quadratic,
    rela_naive,
)
from recgrela import kernels
from recgrela.kernels import _numpy as knp
from recgrela.numerics import make_rng
from recgrela.positional import RopeTable


def backends():
    return kernels.available_backends()


@pytest.mark.parametrize("backend", backends())
@pytest.mark.parametrize("causal", [False, True])
def test_linear_streaming_matches_quadratic_oracle(backend, causal):
    rng = make_rng(0)
    for n in (1, 2, 5, 8, 13):
        for d in (1, 2, 4, 8):
            q = rng.uniform(-2, 2, (1, n, d))
            k = rng.uniform(-2, 2, (1, n, d))
            v = rng.uniform(-2, 2, (1, n, d))
            got, floored = kernels.kla_forward(q, k, v, causal=causal,
                                               backend=backend)
            want = linear_attention_quadratic(q[0], k[0], v[0], causal)
            assert floored == 0
            assert np.max(np.abs(got[0] - want)) < 1e-10


@pytest.mark.parametrize("backend", backends())
def test_linear_streaming_chunk_boundaries(backend):
    # chunk smaller than N exercises the carry state
    rng = make_rng(3)
    n, d = 23, 4
    q, k, v = (rng.normal(size=(2, n, d)) for _ in range(3))
    ref, _ = kernels.kla_forward(q, k, v, causal=True, backend="numpy",
                                 chunk=1024)
    got, _ = kernels.kla_forward(q, k, v, causal=True, backend=backend,
                                 chunk=5)
    assert np.max(np.abs(got - ref)) < 1e-12


@pytest.mark.parametrize("backend", backends())
@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("heads", [1, 2])
def test_rela_streaming_matches_naive_oracle(backend, causal, heads):
    rng = make_rng(11)
    eps = 1e-6
    for n in (1, 3, 8):
        for d in (2, 4, 8):
            dd = d * heads
            table = RopeTable(max(n, 4), dd)
            q = rng.uniform(-2, 2, (1, n, dd))
            k = rng.uniform(-2, 2, (1, n, dd))
            v = rng.uniform(-2, 2, (1, n, dd))
            got, _ = kernels.kla_forward(
                q, k, v, heads=heads, causal=causal, eps=eps, scale_len=n,
                cos=table.cos, sin=table.sin, backend=backend)
            want = rela_naive(q[0], k[0], v[0], table.angles[:n], causal,
                              eps, n, heads=heads)
            assert np.max(np.abs(got[0] - want)) < 1e-10


@pytest.mark.parametrize("backend", backends())
def test_rela_degenerates_to_linear_attention(backend):
    # zero rotation angles + scaling off + eps -> 0 reduces to the plain form
    rng = make_rng(21)
    n, d = 9, 4
    table = RopeTable.identity(n, d)
    q, k, v = (rng.normal(size=(1, n, d)) for _ in range(3))
    for causal in (False, True):
        rela, _ = kernels.kla_forward(q, k, v, causal=causal, eps=1e-15,
                                      scale_len=None, cos=table.cos,
                                      sin=table.sin, backend=backend)
        plain, _ = kernels.kla_forward(q, k, v, causal=causal, backend=backend)
        assert np.max(np.abs(rela - plain)) < 1e-9


def test_single_position_returns_values():
    rng = make_rng(2)
    q, k, v = (rng.normal(size=(1, 1, 4)) for _ in range(3))
    out, _ = kernels.kla_forward(q, k, v, causal=True)
    np.testing.assert_allclose(out, v, atol=1e-12)
    table = RopeTable(1, 4)
    out, _ = kernels.kla_forward(q, k, v, causal=True, eps=1e-9, scale_len=1,
                                 cos=table.cos, sin=table.sin)
    np.testing.assert_allclose(out, v, atol=1e-6)


def test_equal_keys_give_mean_of_values():
    rng = make_rng(5)
    n, d = 6, 3
    q = rng.normal(size=(1, n, d))
    k = np.broadcast_to(rng.normal(size=(1, 1, d)), (1, n, d)).copy()
    v = rng.normal(size=(1, n, d))
    out, _ = kernels.kla_forward(q, k, v, causal=False)
    np.testing.assert_allclose(out[0], np.tile(v[0].mean(axis=0), (n, 1)),
                               atol=1e-12)


@pytest.mark.parametrize("backend", backends())
def test_padding_mask_drops_masked_keys(backend):
    rng = make_rng(8)
    n, d = 8, 4
    q, k, v = (rng.normal(size=(1, n, d)) for _ in range(3))
    mask = np.ones((1, n))
    mask[0, :3] = 0.0  # left padding
    got, _ = kernels.kla_forward(q, k, v, causal=True, mask=mask,
                                 backend=backend)
    # oracle: run on the unpadded suffix only
    want = linear_attention_quadratic(q[0, 3:], k[0, 3:], v[0, 3:], True)
    assert np.max(np.abs(got[0, 3:] - want)) < 1e-10
    assert np.all(np.isfinite(got))


def test_denominator_floor_reported():
    # saturated negative keys underflow the normalizer when eps == 0
    q = np.full((1, 2, 2), -800.0)
    k = np.full((1, 2, 2), -800.0)
    v = np.ones((1, 2, 2))
    out, floored = kernels.kla_forward(q, k, v, causal=True, backend="numpy")
    assert floored == 2
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("backend", backends())
@pytest.mark.parametrize("causal", [False, True])
def test_dot_product_matches_rowwise_softmax(backend, causal):
    rng = make_rng(4)
    for n, d in ((1, 3), (5, 3), (8, 4)):
        q, k, v = (rng.normal(size=(1, n, d)) for _ in range(3))
        got = kernels.sdp_forward(q, k, v, causal=causal, backend=backend)
        want = dot_product_rowwise(q[0], k[0], v[0], causal)
        assert np.max(np.abs(got[0] - want)) < 1e-12


def test_dot_product_single_row_and_uniform():
    rng = make_rng(6)
    v = rng.normal(size=(1, 1, 4))
    out = kernels.sdp_forward(rng.normal(size=(1, 1, 4)),
                              rng.normal(size=(1, 1, 4)), v)
    np.testing.assert_allclose(out, v, atol=1e-12)
    # constant scores -> every output row is the mean of values
    n = 7
    q = np.zeros((1, n, 3))
    k = rng.normal(size=(1, n, 3))
    v = rng.normal(size=(1, n, 3))
    out = kernels.sdp_forward(q, k, v, causal=False)
    np.testing.assert_allclose(out[0], np.tile(v[0].mean(axis=0), (n, 1)),
                               atol=1e-12)


def test_dot_product_causal_prefix_is_bitwise_stable():
    # output row m must not change when future values are perturbed
    rng = make_rng(9)
    n, d = 10, 4
    q, k, v = (rng.normal(size=(1, n, d)) for _ in range(3))
    base = kernels.sdp_forward(q, k, v, causal=True, backend="numpy")
    v2, k2 = v.copy(), k.copy()
    v2[0, 6:] += 100.0
    k2[0, 6:] -= 3.0
    pert = kernels.sdp_forward(q, k2, v2, causal=True, backend="numpy")
    assert np.array_equal(base[0, :6], pert[0, :6])


def test_kla_causal_prefix_is_bitwise_stable():
    rng = make_rng(19)
    n, d = 12, 4
    table = RopeTable(n, d)
    q, k, v = (rng.normal(size=(1, n, d)) for _ in range(3))
    kw = dict(causal=True, eps=1e-6, scale_len=n, cos=table.cos, sin=table.sin,
              backend="numpy")
    base, _ = kernels.kla_forward(q, k, v, **kw)
    k2, v2 = k.copy(), v.copy()
    k2[0, 7:] += 5.0
    v2[0, 7:] -= 2.0
    pert, _ = kernels.kla_forward(q, k2, v2, **kw)
    assert np.array_equal(base[0, :7], pert[0, :7])


# ---------------------------------------------------------------------------
# backward passes vs finite differences
# ---------------------------------------------------------------------------


def _fd(fn, arrs, idx, h=1e-6):
    """Central differences of scalar fn w.r.t. arrs[idx]."""
    a = arrs[idx]
    g = np.zeros_like(a)
    flat = a.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("rotated", [False, True])
def test_kla_backward_matches_finite_differences(causal, rotated):
    rng = make_rng(13)
    n, dd, heads = 5, 4, 2
    q, k, v = (rng.uniform(-1.5, 1.5, (2, n, dd)) for _ in range(3))
    w = rng.normal(size=(2, n, dd))  # random linear functional
    table = RopeTable(n, dd)
    kw = dict(heads=heads, causal=causal, eps=1e-4,
              scale_len=n if rotated else None,
              cos=table.cos if rotated else None,
              sin=table.sin if rotated else None)

    def loss():
        out, _ = knp.kla_forward(q, k, v, **kw)
        return float((out * w).sum())

    dq, dk, dv = knp.kla_backward(w, q, k, v, **kw)
    for got, idx in ((dq, 0), (dk, 1), (dv, 2)):
        num = _fd(loss, [q, k, v], idx)
        assert np.max(np.abs(got - num)) < 1e-6


def test_kla_backward_with_mask():
    rng = make_rng(14)
    n, dd = 6, 4
    q, k, v = (rng.uniform(-1, 1, (1, n, dd)) for _ in range(3))
    mask = np.ones((1, n))
    mask[0, :2] = 0.0
    w = rng.normal(size=(1, n, dd)) * mask[:, :, None]
    table = RopeTable(n, dd)
    kw = dict(heads=2, causal=True, eps=1e-5, scale_len=n,
              cos=table.cos, sin=table.sin, mask=mask)

    def loss():
        out, _ = knp.kla_forward(q, k, v, **kw)
        return float((out * w).sum())

    dq, dk, dv = knp.kla_backward(w, q, k, v, **kw)
    for got, idx in ((dq, 0), (dk, 1), (dv, 2)):
        num = _fd(loss, [q, k, v], idx)
        assert np.max(np.abs(got - num)) < 1e-6


@pytest.mark.parametrize("causal", [False, True])
def test_sdp_backward_matches_finite_differences(causal):
    rng = make_rng(15)
    n, dd = 5, 4
    q, k, v = (rng.normal(size=(1, n, dd)) for _ in range(3))
    w = rng.normal(size=(1, n, dd))

    def loss():
        return float((knp.sdp_forward(q, k, v, heads=2, causal=causal) * w).sum())

    dq, dk, dv = knp.sdp_backward(w, q, k, v, heads=2, causal=causal)
    for got, idx in ((dq, 0), (dk, 1), (dv, 2)):
        num = _fd(loss, [q, k, v], idx)
        assert np.max(np.abs(got - num)) < 1e-6


# ---------------------------------------------------------------------------
# depthwise causal convolution
# ---------------------------------------------------------------------------


def test_conv_delta_kernel_is_identity():
    rng = make_rng(16)
    x = rng.normal(size=(2, 6, 3))
    kern = np.zeros((4, 3))
    kern[-1] = 1.0  # delta on the current tap
    np.testing.assert_allclose(knp.causal_conv_forward(x, kern), x, atol=1e-15)


def test_conv_impulse_support():
    n, kw = 10, 4
    x = np.zeros((1, n, 2))
    p = 3
    x[0, p] = 1.0
    out = knp.causal_conv_forward(x, np.ones((kw, 2)))
    nz = np.nonzero(out[0, :, 0])[0]
    assert nz.min() == p and nz.max() == p + kw - 1


def test_conv_matches_sliding_window_oracle():
    rng = make_rng(17)
    x = rng.normal(size=(2, 6, 5))
    kern = rng.normal(size=(4, 5))
    got = knp.causal_conv_forward(x, kern)
    want = causal_conv_sliding(x, kern)
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_backward_matches_finite_differences():
    rng = make_rng(18)
    x = rng.normal(size=(2, 5, 3))
    kern = rng.normal(size=(3, 3))
    w = rng.normal(size=(2, 5, 3))

    def loss():
        return float((knp.causal_conv_forward(x, kern) * w).sum())

    dx, dkern = knp.causal_conv_backward(w, x, kern)
    assert np.max(np.abs(dx - _fd(loss, [x, kern], 0))) < 1e-7
    assert np.max(np.abs(dkern - _fd(loss, [x, kern], 1))) < 1e-7
