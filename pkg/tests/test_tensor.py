import numpy as np
import pytest

from moelab import tensor as T
from moelab.gradcheck import grad_check
from moelab.tensor import Graph, Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_matmul_identity_cases():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    col = Tensor([[5.0], [7.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), col).data, col.data)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    b = Tensor(rng.standard_normal((4, 2)))
    x = leaf(rng.standard_normal((3, 4)))
    report = grad_check(lambda t: T.matmul(t, b).sum(), x, tol=1e-6)
    assert report.ok, report


def test_matmul_shape_error_names_both_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2)))
    with pytest.raises(T.ShapeError) as err:
        T.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_row_stable_kernel_matches_and_is_row_stable():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((37, 16))
    b = rng.standard_normal((16, 8))
    full = T.matmul(Tensor(a), Tensor(b), row_stable=True).data
    assert np.allclose(full, a @ b, atol=1e-12)
    # any row subset must reproduce the full result's bits exactly
    for seed in range(5):
        idx = np.sort(np.random.default_rng(seed).choice(37, size=11, replace=False))
        sub = T.matmul(Tensor(a[idx]), Tensor(b), row_stable=True).data
        assert np.array_equal(sub, full[idx])


def test_softmax_symmetry_and_stability():
    out = T.softmax(Tensor([0.0, 0.0])).data
    assert np.array_equal(out, [0.5, 0.5])
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert big[0] > 0.999999 and big[1] < 1e-6 and np.all(np.isfinite(big))


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(T.softmax(Tensor(x)).data - direct)) < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = T.softmax(Tensor(rng.standard_normal((50, 17)) * 30.0), axis=-1).data
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12


def test_silu_and_mean_point_values():
    assert T.silu(Tensor([0.0])).data[0] == 0.0
    assert T.mean(Tensor([2.0, 4.0, 6.0])).data == 4.0


@pytest.mark.parametrize("name,f,positive", [
    ("add", lambda x, c: T.add(x, c).sum(), False),
    ("mul", lambda x, c: T.mul(x, c).sum(), False),
    ("div", lambda x, c: T.div(x, c).sum(), False),
    ("sub", lambda x, c: T.sub(x, c).sum(), False),
    ("sigmoid", lambda x, c: (T.sigmoid(x) * c).sum(), False),
    ("silu", lambda x, c: (T.silu(x) * c).sum(), False),
    ("exp", lambda x, c: (T.exp(x) * c).sum(), False),
    ("log", lambda x, c: (T.log(x) * c).sum(), True),
    ("rsqrt", lambda x, c: (T.rsqrt(x) * c).sum(), True),
    ("square", lambda x, c: (T.square(x) * c).sum(), False),
    ("abs", lambda x, c: (T.abs_(x) * c).sum(), False),
    ("mean", lambda x, c: (T.mean(x, axis=1, keepdims=True) * c[:, :1]).sum(), False),
    ("sum", lambda x, c: (T.sum_(x, axis=0) * c[0]).sum(), False),
    ("softmax", lambda x, c: (T.softmax(x, axis=-1) * c).sum(), False),
    ("log_softmax", lambda x, c: (T.log_softmax(x, axis=-1) * c).sum(), False),
    ("logsumexp", lambda x, c: (T.logsumexp(x, axis=-1) * c[:, 0]).sum(), False),
    ("reshape", lambda x, c: (T.reshape(x, (-1,)) * c.reshape(-1)).sum(), False),
    ("transpose", lambda x, c: (T.transpose(x) * c.transpose()).sum(), False),
    ("slice", lambda x, c: (x[1:3, ::2] * c[1:3, ::2]).sum(), False),
])
def test_op_gradients_vs_finite_differences(name, f, positive):
    rng = np.random.default_rng(hash(name) % 2**32)
    base = rng.uniform(0.5, 2.0, (4, 6)) if positive else rng.standard_normal((4, 6))
    # abs has a kink at 0; random draws stay away from it at eps scale
    c = Tensor(rng.standard_normal((4, 6)))
    x = leaf(base)
    report = grad_check(lambda t: f(t, c), x, tol=1e-6)
    assert report.ok, (name, report)


def test_concat_gradient():
    rng = np.random.default_rng(3)
    other = Tensor(rng.standard_normal((2, 3)))
    c = Tensor(rng.standard_normal((5, 3)))
    x = leaf(rng.standard_normal((3, 3)))
    report = grad_check(lambda t: (T.concat([t, other], axis=0) * c).sum(), x, tol=1e-6)
    assert report.ok, report


def test_take_rows_is_embedding_lookup_and_differentiates():
    rng = np.random.default_rng(4)
    table = leaf(rng.standard_normal((7, 3)))
    ids = np.array([1, 1, 6, 0])
    out = T.take_rows(table, ids)
    assert np.array_equal(out.data, table.data[ids])
    c = Tensor(rng.standard_normal((4, 3)))
    report = grad_check(lambda t: (T.take_rows(t, ids) * c).sum(), table, tol=1e-6)
    assert report.ok, report
    with pytest.raises(IndexError):
        T.take_rows(table, np.array([7]))


def test_scatter_rows_sums_duplicates_and_differentiates():
    rng = np.random.default_rng(5)
    vals = leaf(rng.standard_normal((4, 2)))
    idx = np.array([0, 2, 0, 1])
    out = T.scatter_rows(vals, idx, 3)
    expect = np.zeros((3, 2))
    for i, r in zip(idx, vals.data):
        expect[i] += r
    assert np.allclose(out.data, expect, atol=1e-15)
    c = Tensor(rng.standard_normal((3, 2)))
    report = grad_check(lambda t: (T.scatter_rows(t, idx, 3) * c).sum(), vals, tol=1e-6)
    assert report.ok, report


def test_gather_pairs_gradient():
    rng = np.random.default_rng(6)
    x = leaf(rng.standard_normal((5, 4)))
    rows = np.array([0, 0, 3, 4])
    cols = np.array([1, 1, 0, 3])
    c = Tensor(rng.standard_normal(4))
    report = grad_check(lambda t: (T.gather_pairs(t, rows, cols) * c).sum(), x, tol=1e-6)
    assert report.ok, report


def test_rope_rotation_gradient_and_zero_angle_identity():
    rng = np.random.default_rng(7)
    x = leaf(rng.standard_normal((5, 6)))
    zero = T.rope(x, np.ones((5, 3)), np.zeros((5, 3)))
    assert np.array_equal(zero.data, x.data)
    ang = rng.uniform(0, 2 * np.pi, (5, 3))
    cos, sin = np.cos(ang), np.sin(ang)
    c = Tensor(rng.standard_normal((5, 6)))
    report = grad_check(lambda t: (T.rope(t, cos, sin) * c).sum(), x, tol=1e-6)
    assert report.ok, report


def test_grad_check_analytic_oracle_sum_of_squares():
    x = leaf([1.0, 2.0])
    report = grad_check(lambda t: T.square(t).sum(), x, tol=1e-6)
    assert report.max_abs_err < 1e-8
    x.zero_grad()
    with Graph() as g:
        out = T.square(x).sum()
        g.backward(out)
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-15)


def test_grad_check_constant_function_gradient_exactly_zero():
    x = leaf([3.0, -1.0])
    c = Tensor([1.0])
    report = grad_check(lambda t: (t * 0.0).sum() + c[0:1].sum(), x, tol=1e-6)
    assert report.max_abs_err == 0.0


def test_gradient_accumulation_is_additive():
    x = leaf([1.5])
    with Graph() as g:
        y = x + x  # consumed twice: both contributions must land
        g.backward(y.sum())
    assert x.grad[0] == 2.0


def test_bias_add_broadcast_gradient():
    rng = np.random.default_rng(8)
    b = leaf(rng.standard_normal(4))
    m = Tensor(rng.standard_normal((3, 4)))
    report = grad_check(lambda t: (m + t).sum(), b, tol=1e-6)
    assert report.ok
    assert np.allclose(b.grad, 3.0, atol=1e-12)  # summed over the broadcast rows


def test_domain_and_nonfinite_errors_name_the_op():
    with pytest.raises(T.DomainError):
        T.log(Tensor([1.0, -1.0]))
    with pytest.raises(T.DomainError):
        T.rsqrt(Tensor([0.0]))
    with pytest.raises(T.NonFiniteError) as err:
        T.exp(Tensor([1000.0]))
    assert "exp" in str(err.value)


def test_backward_runs_exactly_once_and_needs_scalar_root():
    x = leaf([1.0, 2.0])
    with Graph() as g:
        y = T.square(x)
        with pytest.raises(T.ShapeError):
            g.backward(y)
        s = y.sum()
        g.backward(s)
        with pytest.raises(RuntimeError):
            g.backward(s)


def test_forward_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = leaf(rng.standard_normal((6, 5)))
        w = leaf(rng.standard_normal((5, 4)))
        with Graph() as g:
            h = T.silu(T.matmul(x, w))
            loss = T.mean(T.square(h))
            g.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_float32_mode_round_trip():
    T.set_default_dtype(np.float32)
    try:
        x = Tensor([1.0, 2.0])
        assert x.data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
