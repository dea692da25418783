import math

import numpy as np
import pytest

from cvlm import tensor as T
from gradcheck import finite_diff_grad, max_rel_err


def test_matmul_identity():
    a = T.Tensor(np.eye(2, dtype=np.float32))
    b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.allclose(T.matmul(a, b).data, [[3, 4], [5, 6]])


def test_matmul_dot_product():
    a = T.Tensor([[1.0, 2.0]])
    b = T.Tensor([[3.0], [4.0]])
    assert np.allclose(T.matmul(a, b).data, [[11.0]])


def _loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.max(np.abs(got - _loop_matmul(a, b))) < 1e-6


@pytest.mark.parametrize("dtype,tol", [(T.F32, 1e-6), (T.F64, 1e-12)])
def test_matmul_oracle_random_shapes(dtype, tol):
    rng = np.random.default_rng(11)
    for _ in range(12):
        m, k, n = rng.integers(1, 17, size=3)
        a = (rng.standard_normal((m, k)) * 0.25).astype(T._NP_DTYPES[dtype])
        b = (rng.standard_normal((k, n)) * 0.25).astype(T._NP_DTYPES[dtype])
        got = T.matmul(T.Tensor(a, dtype=dtype), T.Tensor(b, dtype=dtype)).data
        assert np.max(np.abs(got - _loop_matmul(a, b))) < tol


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_mixed_dtype_rejected():
    with pytest.raises(T.ShapeError, match="dtype"):
        T.add(T.zeros((2,), dtype=T.F32), T.zeros((2,), dtype=T.F64))


def test_softmax_uniform():
    y = T.softmax_rows(T.Tensor([0.0, 0.0, 0.0, 0.0])).data
    assert np.allclose(y, 0.25, atol=1e-7)


def test_softmax_extreme_logits_stable():
    y = T.softmax_rows(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert abs(y[0] - 1.0) < 1e-6 and abs(y[1]) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((8, 16)) * 1e4)
    sums = T.softmax_rows(x).data.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-6


def test_layer_norm_constant_slice_collapses_to_bias():
    x = T.Tensor([5.0, 5.0, 5.0, 5.0])
    out = T.layer_norm(x, T.ones((4,)), T.zeros((4,))).data
    assert np.allclose(out, 0.0, atol=1e-6)


def test_layer_norm_zero_gain_yields_bias():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.standard_normal((3, 8)), dtype=T.F32)
    bias = T.Tensor(rng.standard_normal(8), dtype=T.F32)
    out = T.layer_norm(x, T.zeros((8,)), bias).data
    assert np.allclose(out, np.broadcast_to(bias.data, (3, 8)), atol=1e-6)


def test_layer_norm_normalizes():
    rng = np.random.default_rng(9)
    x = T.Tensor(rng.standard_normal((4, 32)) * 3 + 1, dtype=T.F64)
    out = T.layer_norm(x, T.ones((32,), dtype=T.F64), T.zeros((32,), dtype=T.F64),
                       eps=1e-12).data
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-6
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4


def test_gelu_values():
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(T.Tensor([10.0])).data[0] - 10.0) < 1e-4
    assert abs(T.gelu(T.Tensor([-10.0])).data[0]) < 1e-4


def test_gelu_exact_matches_tanh_closely():
    x = T.Tensor(np.linspace(-3, 3, 31))
    approx = T.gelu(x).data
    exact = T.gelu(x, exact=True).data
    assert np.max(np.abs(approx - exact)) < 5e-3


def test_embedding_lookup_rows():
    table = T.Tensor(np.arange(12.0).reshape(4, 3))
    assert np.allclose(T.embedding_lookup(table, [0]).data, [[0, 1, 2]])
    two = T.embedding_lookup(table, [2, 2]).data
    assert np.allclose(two[0], two[1])


def test_embedding_lookup_out_of_range():
    table = T.Tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError, match="4"):
        T.embedding_lookup(table, [4])


def test_cross_entropy_uniform():
    logits = T.Tensor(np.zeros((1, 4)))
    loss = T.cross_entropy(logits, [2], [True]).item()
    assert abs(loss - math.log(4)) < 1e-6


def test_cross_entropy_confident():
    row = np.zeros((1, 5), dtype=np.float32)
    row[0, 3] = 20.0
    loss = T.cross_entropy(T.Tensor(row), [3], [True]).item()
    assert loss < 1e-6


def test_cross_entropy_masking():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((2, 6)).astype(np.float32)
    both = T.cross_entropy(T.Tensor(logits[:1]), [4], [True]).item()
    masked = T.cross_entropy(T.Tensor(logits), [4, 1], [True, False]).item()
    assert abs(both - masked) < 1e-7


def test_cross_entropy_all_masked_out():
    with pytest.raises(ValueError, match="mask"):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_backward_sum_gives_ones():
    x = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(loss, tape)
    assert np.allclose(x.grad, 1.0)


def test_backward_sum_of_squares():
    x = T.Tensor(np.random.default_rng(0).standard_normal((5,)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    T.backward(loss, tape)
    assert np.allclose(x.grad, 2 * x.data, atol=1e-6)


def test_backward_rejects_non_scalar_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(T.GradError, match="scalar"):
        T.backward(y, tape)


def test_backward_rejects_detached_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum_all(x)  # no tape active while computing
    with T.Tape() as tape:
        pass
    with pytest.raises(T.GradError, match="detached"):
        T.backward(loss, tape)


def test_tape_single_use():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(loss, tape)
    with pytest.raises(T.GradError, match="consumed"):
        T.backward(loss, tape)


RNG = np.random.default_rng(42)


def _p(shape):
    return T.Tensor(RNG.standard_normal(shape), dtype=T.F64, requires_grad=True)


FD_OPS = {
    "matmul": lambda: ((a := _p((3, 4)), b := _p((4, 2))),
                       lambda: T.sum_all(T.mul(m := T.matmul(a, b), m))),
    "add_same": lambda: ((a := _p((3, 4)), b := _p((3, 4))),
                         lambda: T.sum_all(T.mul(s := T.add(a, b), s))),
    "add_bias": lambda: ((a := _p((3, 4)), b := _p((4,))),
                         lambda: T.sum_all(T.mul(s := T.add(a, b), s))),
    "mul": lambda: ((a := _p((5,)), b := _p((5,))),
                    lambda: T.sum_all(T.mul(T.mul(a, b), T.mul(a, b)))),
    "scale": lambda: ((a := _p((4, 3)),),
                      lambda: T.sum_all(T.mul(s := T.scale(a, 2.5), s))),
    "gelu": lambda: ((a := _p((4, 5)),),
                     lambda: T.sum_all(T.mul(g := T.gelu(a), g))),
    "gelu_exact": lambda: ((a := _p((4, 5)),),
                           lambda: T.sum_all(T.mul(g := T.gelu(a, exact=True), g))),
    "softmax_rows": lambda: ((a := _p((3, 6)),),
                             lambda: T.sum_all(T.mul(s := T.softmax_rows(a), s))),
    "layer_norm": lambda: ((x := _p((3, 8)), g := _p((8,)), b := _p((8,))),
                           lambda: T.sum_all(T.mul(y := T.layer_norm(x, g, b), y))),
    "embedding": lambda: ((t := _p((6, 4)),),
                          lambda: T.sum_all(T.mul(e := T.embedding_lookup(t, [1, 3, 3, 0]), e))),
    "cross_entropy": lambda: ((l := _p((4, 7)),),
                              lambda: T.cross_entropy(l, [1, 0, 6, 2], [True, False, True, True])),
    "narrow": lambda: ((a := _p((5, 6)),),
                       lambda: T.sum_all(T.mul(n := T.narrow(a, 1, 2, 3), n))),
    "concat": lambda: ((a := _p((2, 3)), b := _p((4, 3))),
                       lambda: T.sum_all(T.mul(c := T.concat([a, b], axis=0), c))),
    "transpose2d": lambda: ((a := _p((3, 5)),),
                            lambda: T.sum_all(T.mul(t := T.transpose2d(a), t))),
    "reshape": lambda: ((a := _p((4, 6)),),
                        lambda: T.sum_all(T.mul(r := T.reshape(a, (8, 3)), r))),
    "rotate_pairs": lambda: ((a := _p((3, 2, 4)),),
                             lambda: T.sum_all(T.mul(r := T.rotate_pairs(a), r))),
}


@pytest.mark.parametrize("name", sorted(FD_OPS))
def test_op_gradients_match_finite_differences(name):
    params, forward = FD_OPS[name]()
    with T.Tape() as tape:
        loss = forward()
    T.backward(loss, tape)
    for p in params:
        p_grad = p.grad
        fd = finite_diff_grad(lambda: forward().item(), p.data)
        err = max_rel_err(p_grad, fd)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_seeded_replay_is_bitwise_identical():
    def run():
        rng = np.random.default_rng(123)
        x = T.Tensor(rng.standard_normal((6, 8)))
        w = T.Tensor(rng.standard_normal((8, 8)))
        b = T.Tensor(rng.standard_normal(8))
        y = T.softmax_rows(T.gelu(T.add(T.matmul(x, w), b)))
        return y.data.tobytes()

    assert run() == run()


def test_rotate_pairs_values():
    x = T.Tensor([[1.0, 2.0, 3.0, 4.0]])
    y = T.rotate_pairs(x).data
    assert np.allclose(y, [[-2.0, 1.0, -4.0, 3.0]])
