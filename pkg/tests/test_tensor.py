import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsde.tensor import (
    EmptyTensor,
    NotRecorded,
    NotScalar,
    ShapeMismatch,
    Tape,
    Tensor,
    add,
    add_time_feature,
    cheb_apply,
    channel_mix,
    concat,
    conv_time,
    elementwise,
    embedding_rows,
    add_channel_bias,
    add_channel_vec,
    gradient_check,
    linear,
    matmul,
    mean_sq,
    mul,
    nonlinearity,
    permute,
    reshape,
    row_affine,
    scale,
    scale_per_sample,
    silu,
    slice_time,
    sub,
    subsample_time,
    temporal_conv1d,
    time_linear,
    upsample_time,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# elementwise


def test_add_componentwise():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_scalar():
    out = mul(Tensor([2.0, 3.0]), 0.0)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_sub_self_is_zero():
    x = Tensor(rng(1).standard_normal((3, 4)))
    np.testing.assert_array_equal(sub(x, x).data, np.zeros((3, 4)))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_scale_rejects_tensor():
    with pytest.raises(ShapeMismatch):
        elementwise("scale", Tensor([1.0]), Tensor([2.0]))


def test_elementwise_unknown_kind():
    with pytest.raises(ValueError):
        elementwise("div", Tensor([1.0]), Tensor([1.0]))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_add_commutes(vals):
    a = Tensor(vals)
    b = Tensor(vals[::-1])
    np.testing.assert_array_equal(add(a, b).data, add(b, a).data)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = Tensor(rng(2).standard_normal((2, 2)))
    out = matmul(Tensor(np.eye(2)), m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_matmul_gradient_trace_style():
    # scalar = mean_sq(A @ B) exercises both factor gradients
    b_const = Tensor(rng(3).standard_normal((3, 2)))
    a0 = Tensor(rng(4).standard_normal((2, 3)))
    err = gradient_check(lambda a: mean_sq(matmul(a, b_const)), a0)
    assert err <= 1e-5
    a_const = Tensor(rng(5).standard_normal((2, 3)))
    err = gradient_check(lambda b: mean_sq(matmul(a_const, b)), b_const)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# temporal_conv1d


def test_conv_delta_kernel_is_identity():
    x = Tensor(rng(6).standard_normal((2, 3, 7)))
    k = np.zeros((3, 3, 3))
    for c in range(3):
        k[c, c, 1] = 1.0
    out = temporal_conv1d(x, Tensor(k))
    np.testing.assert_allclose(out.data, x.data, atol=1e-15)


def test_conv_averaging_kernel_constant_interior():
    x = Tensor(np.full((1, 1, 9), 5.0))
    k = Tensor(np.full((1, 1, 3), 1.0 / 3.0))
    out = temporal_conv1d(x, k)
    np.testing.assert_allclose(out.data[0, 0, 1:-1], 5.0)


def test_conv_shape_checks():
    with pytest.raises(ShapeMismatch):
        temporal_conv1d(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        temporal_conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((4, 3, 3))))
    with pytest.raises(ShapeMismatch):  # even width
        temporal_conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((4, 2, 2))))


def test_conv_gradient():
    k_const = Tensor(rng(7).standard_normal((2, 3, 3)))
    x0 = Tensor(rng(8).standard_normal((2, 3, 5)))
    assert gradient_check(lambda x: mean_sq(temporal_conv1d(x, k_const)), x0) <= 1e-5
    assert gradient_check(lambda k: mean_sq(temporal_conv1d(x0, k)), k_const) <= 1e-5


# ---------------------------------------------------------------------------
# nonlinearity / mean_sq


def test_silu_values():
    assert silu(Tensor(0.0)).item() == 0.0
    assert abs(silu(Tensor(20.0)).item() - 20.0) <= 1e-7


def test_silu_gradient():
    x0 = Tensor(rng(9).standard_normal(11))
    assert gradient_check(lambda x: mean_sq(nonlinearity(x, "silu")), x0) <= 1e-5


def test_nonlinearity_unknown():
    with pytest.raises(ValueError):
        nonlinearity(Tensor([1.0]), "relu")


def test_mean_sq_values():
    assert mean_sq(Tensor([0.0, 0.0, 0.0])).item() == 0.0
    assert mean_sq(Tensor([1.0, -1.0])).item() == 1.0
    assert mean_sq(Tensor([3.0])).item() == 9.0


def test_mean_sq_empty():
    with pytest.raises(EmptyTensor):
        mean_sq(Tensor(np.zeros((0, 2))))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
@settings(max_examples=50, deadline=None)
def test_mean_sq_nonnegative(vals):
    assert mean_sq(Tensor(vals)).item() >= 0.0


# ---------------------------------------------------------------------------
# backward


def test_backward_mean_sq_leaf():
    with Tape() as tape:
        leaf = tape.watch(Tensor([2.0]))
        tape.backward(mean_sq(leaf))
        np.testing.assert_array_equal(tape.grad(leaf).data, [4.0])


def test_backward_independent_leaf_zero():
    with Tape() as tape:
        used = tape.watch(Tensor([1.0, 2.0]))
        unused = tape.watch(Tensor(np.ones((2, 2))))
        tape.backward(mean_sq(used))
        np.testing.assert_array_equal(tape.grad(unused).data, np.zeros((2, 2)))


def test_backward_composite_matches_fd():
    k_const = Tensor(rng(10).standard_normal((2, 2, 3)))
    x0 = Tensor(rng(11).standard_normal((1, 2, 6)))
    err = gradient_check(lambda x: mean_sq(silu(temporal_conv1d(x, k_const))), x0)
    assert err <= 1e-4


def test_backward_not_scalar():
    with Tape() as tape:
        leaf = tape.watch(Tensor([1.0, 2.0]))
        y = add(leaf, leaf)
        with pytest.raises(NotScalar):
            tape.backward(y)


def test_backward_not_recorded():
    with Tape() as tape:
        with pytest.raises(NotRecorded):
            tape.backward(Tensor(1.0))
    loose = Tensor(1.0)
    with pytest.raises(NotRecorded):
        from stsde.tensor import backward

        backward(loose)


def test_backward_linearity():
    x_data = rng(12).standard_normal(5)

    def grads_of(make):
        with Tape() as tape:
            x = tape.watch(Tensor(x_data))
            tape.backward(make(x))
            return tape.grad(x).data

    gf = grads_of(lambda x: mean_sq(silu(x)))
    gg = grads_of(lambda x: mean_sq(mul(x, x)))
    gsum = grads_of(lambda x: add(mean_sq(silu(x)), mean_sq(mul(x, x))))
    np.testing.assert_allclose(gsum, gf + gg, rtol=1e-12)


def test_ops_bit_identical_reruns():
    x = Tensor(rng(13).standard_normal((2, 3, 8)))
    k = Tensor(rng(14).standard_normal((4, 3, 5)))
    a = temporal_conv1d(x, k).data
    b = temporal_conv1d(x, k).data
    assert np.array_equal(a, b)


def test_constants_not_recorded():
    with Tape() as tape:
        c = Tensor([1.0, 2.0])  # never watched
        out = add(c, c)
        assert out.node_id is None
        leaf = tape.watch(Tensor([1.0, 1.0]))
        out2 = add(leaf, c)
        assert out2.node_id is not None


# ---------------------------------------------------------------------------
# gradient_check harness itself


def test_gradient_check_polynomial_exact():
    assert gradient_check(mean_sq, Tensor(rng(15).standard_normal(7))) <= 1e-8


def test_gradient_check_constant_f():
    err = gradient_check(lambda x: mean_sq(mul(x, 0.0)), Tensor([1.0, 2.0]))
    assert err == 0.0


def test_gradient_check_eps_range():
    with pytest.raises(ValueError):
        gradient_check(mean_sq, Tensor([1.0]), eps=1e-2)


def test_gradient_check_not_scalar():
    with pytest.raises(NotScalar):
        gradient_check(lambda x: add(x, x), Tensor([1.0, 2.0]))


# ---------------------------------------------------------------------------
# network kernels: one finite-difference sweep per differentiable input

B, C, N, T = 2, 3, 4, 6


def sweep_cases():
    # Constants are hoisted out of the lambdas so f is a pure function of x.
    r = rng(100)
    x4 = Tensor(r.standard_normal((B, C, N, T)))
    x3 = Tensor(r.standard_normal((B, C, T)))
    x2 = Tensor(r.standard_normal((B, 3)))
    kern = Tensor(r.standard_normal((2, C, 3)))
    w_cm = Tensor(r.standard_normal((5, C)))
    b_cm = Tensor(r.standard_normal(5))
    basis = r.standard_normal((3, N, N))
    vc = Tensor(r.standard_normal((B, C)))
    cb = Tensor(r.standard_normal(C))
    sc_c = Tensor(r.standard_normal(C))
    sh_c = Tensor(r.standard_normal(C))
    w_l = Tensor(r.standard_normal((3, 4)))
    b_l = Tensor(r.standard_normal(4))
    emb = Tensor(r.standard_normal((B, T, 5)))
    w_t = Tensor(r.standard_normal((5, C)))
    table = Tensor(r.standard_normal((3, 4)))
    feat = Tensor(r.standard_normal((B, C, T)))
    other_c = Tensor(r.standard_normal((B, 2, N, T)))
    other_t = Tensor(r.standard_normal((B, C, N, 3)))
    s_b = r.standard_normal(B)
    m_bc = Tensor(r.standard_normal((B, C)))
    m_32 = Tensor(r.standard_normal((3, 2)))
    idx = np.array([[0, 2, 1], [2, 2, 0]])
    return {
        "conv_time/x": (lambda x: mean_sq(conv_time(x, kern)), x4),
        "conv_time/k": (lambda k: mean_sq(conv_time(x4, k)), kern),
        "channel_mix/x": (lambda x: mean_sq(channel_mix(x, w_cm, b_cm)), x4),
        "channel_mix/w": (lambda w: mean_sq(channel_mix(x4, w, b_cm)), w_cm),
        "channel_mix/b": (lambda b: mean_sq(channel_mix(x4, w_cm, b)), b_cm),
        "cheb_apply/x": (lambda x: mean_sq(cheb_apply(x, basis)), x4),
        "row_affine/v": (lambda v: mean_sq(row_affine(v, sc_c, sh_c)), vc),
        "row_affine/scale": (lambda s: mean_sq(row_affine(vc, s, sh_c)), sc_c),
        "row_affine/shift": (lambda h: mean_sq(row_affine(vc, sc_c, h)), sh_c),
        "add_channel_vec/x": (lambda x: mean_sq(add_channel_vec(x, vc)), x4),
        "add_channel_vec/v": (lambda v: mean_sq(add_channel_vec(x4, v)), vc),
        "permute/x": (lambda x: mean_sq(permute(x, (0, 3, 2, 1))), x4),
        "reshape/x": (lambda x: mean_sq(reshape(x, (B, C * N, T))), x4),
        "add_channel_bias/x": (lambda x: mean_sq(add_channel_bias(x, cb)), x4),
        "add_channel_bias/b": (lambda b: mean_sq(add_channel_bias(x4, b)), cb),
        "linear/x": (lambda x: mean_sq(linear(x, w_l, b_l)), x2),
        "linear/w": (lambda w: mean_sq(linear(x2, w, b_l)), w_l),
        "linear/b": (lambda b: mean_sq(linear(x2, w_l, b)), b_l),
        "time_linear/e": (lambda e: mean_sq(time_linear(e, w_t)), emb),
        "time_linear/w": (lambda w: mean_sq(time_linear(emb, w)), w_t),
        "embedding_rows/table": (lambda tb: mean_sq(embedding_rows(tb, idx)), table),
        "add_time_feature/x": (lambda x: mean_sq(add_time_feature(x, feat)), x4),
        "add_time_feature/f": (lambda f: mean_sq(add_time_feature(x4, f)), feat),
        "concat_channels/a": (lambda a: mean_sq(concat(a, other_c, axis=1)), x4),
        "concat_time/b": (lambda b: mean_sq(concat(other_t, b, axis=3)), x4),
        "slice_time/x": (lambda x: mean_sq(slice_time(x, 1, 4)), x4),
        "subsample_time/x": (lambda x: mean_sq(subsample_time(x, 2)), x4),
        "upsample_time/x": (lambda x: mean_sq(upsample_time(x, 2)), x4),
        "scale_per_sample/x": (lambda x: mean_sq(scale_per_sample(x, s_b)), x4),
        "temporal_conv1d/x": (lambda x: mean_sq(temporal_conv1d(x, kern)), x3),
        "silu/x": (lambda x: mean_sq(silu(x)), Tensor(r.standard_normal(9))),
        "elementwise_mul/a": (lambda a: mean_sq(mul(a, m_bc)), m_bc),
        "elementwise_scale/a": (lambda a: mean_sq(scale(a, -1.7)), Tensor(r.standard_normal(6))),
        "matmul/a": (lambda a: mean_sq(matmul(a, m_32)), Tensor(r.standard_normal((2, 3)))),
    }


@pytest.mark.parametrize("name", sorted(sweep_cases().keys()))
def test_gradient_sweep(name):
    f, x0 = sweep_cases()[name]
    assert gradient_check(f, x0, eps=1e-5) <= 1e-4, name


# ---------------------------------------------------------------------------
# kernel semantics


def test_cheb_apply_matches_einsum():
    r = rng(20)
    x = r.standard_normal((B, C, N, T))
    basis = r.standard_normal((3, N, N))
    out = cheb_apply(Tensor(x), basis).data
    ref = np.einsum("knm,bcmt->bkcnt", basis, x).reshape(B, 3 * C, N, T)
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_conv_time_matches_per_node_conv1d():
    r = rng(21)
    x = r.standard_normal((B, C, N, T))
    k = r.standard_normal((2, C, 3))
    out = conv_time(Tensor(x), Tensor(k)).data
    for n in range(N):
        ref = temporal_conv1d(Tensor(x[:, :, n, :]), Tensor(k)).data
        np.testing.assert_allclose(out[:, :, n, :], ref, atol=1e-13)


def test_embedding_rows_gather():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    idx = np.array([[0, 3], [1, 1]])
    out = embedding_rows(table, idx).data
    np.testing.assert_array_equal(out[0, 1], [9.0, 10.0, 11.0])
    np.testing.assert_array_equal(out[1, 0], out[1, 1])
    with pytest.raises(IndexError):
        embedding_rows(table, np.array([[4, 0]]))


def test_upsample_then_subsample_roundtrip():
    x = Tensor(rng(22).standard_normal((B, C, N, T)))
    back = subsample_time(upsample_time(x, 2), 2)
    np.testing.assert_array_equal(back.data, x.data)


def test_concat_slice_roundtrip():
    r = rng(23)
    a = Tensor(r.standard_normal((B, C, N, 3)))
    b = Tensor(r.standard_normal((B, C, N, T)))
    joined = concat(a, b, axis=3)
    np.testing.assert_array_equal(slice_time(joined, 3, 3 + T).data, b.data)


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass
