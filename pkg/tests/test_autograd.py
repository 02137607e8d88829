import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowguard import autograd as ag
from flowguard.autograd import AdamState, Tensor, adam_step, grad_check

from conftest import leaf, max_rel_err, numeric_grad


def scalar(t):
    return float(t.data)


# matmul -----------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = ag.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_dot_product():
    out = ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]  # 1*3 + 2*4


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    ag.sum_(ag.matmul(a, b)).backward()
    f = lambda: ag.matmul(Tensor(a.data), Tensor(b.data)).data.sum()
    assert max_rel_err(a.grad, numeric_grad(f, a.data)) <= 1e-6
    assert max_rel_err(b.grad, numeric_grad(f, b.data)) <= 1e-6


def test_batched_matmul_against_shared_weight_gradient():
    rng = np.random.default_rng(1)
    x, w = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    weights = rng.normal(size=(2, 3, 5))
    ag.sum_(ag.matmul(x, w) * weights).backward()
    f = lambda: float(((x.data @ w.data) * weights).sum())
    assert max_rel_err(w.grad, numeric_grad(f, w.data)) <= 1e-6
    assert max_rel_err(x.grad, numeric_grad(f, x.data)) <= 1e-6


# softmax ----------------------------------------------------------------


def test_softmax_symmetric_row():
    assert np.allclose(ag.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
def test_softmax_constant_row_is_uniform(c):
    assert np.allclose(ag.softmax_rows(Tensor([[c, c, c]])).data, 1 / 3)


def test_softmax_direct_evaluation():
    # exp(ln1)/(1+3) = 0.25, exp(ln3)/(1+3) = 0.75
    out = ag.softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]]))
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-30, 30)),
    st.floats(-100, 100),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = ag.softmax_rows(Tensor(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    shifted = ag.softmax_rows(Tensor(x + c)).data
    assert np.max(np.abs(shifted - s)) <= 1e-9


def test_softmax_mask_excludes_entries():
    mask = np.array([[False, True, False]])
    out = ag.softmax_rows(Tensor([[1.0, 50.0, 1.0]]), mask).data
    assert out.tolist() == [[0.5, 0.0, 0.5]]


# relu -------------------------------------------------------------------


def test_relu_values_and_derivatives():
    assert ag.relu(Tensor([-1.0])).data.tolist() == [0.0]
    assert ag.relu(Tensor([2.0])).data.tolist() == [2.0]
    x = leaf([3.0, -3.0, 0.0])
    ag.sum_(ag.relu(x)).backward()
    assert x.grad.tolist() == [1.0, 0.0, 0.0]
    probe = np.array([3.0, -3.0])
    fd = numeric_grad(lambda: ag.relu(Tensor(probe)).data.sum(), probe)
    assert np.allclose(fd, [1.0, 0.0])


# layer norm -------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = ag.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_unit_row_unchanged_as_eps_vanishes():
    out = ag.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_statistics_on_random_rows():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 5.0, size=(64, 16))
    out = ag.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
    assert np.max(np.abs(out.mean(axis=-1))) <= 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) <= 1e-3


# embedding --------------------------------------------------------------


def test_embedding_gather():
    table = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ag.embedding_lookup(table, [1, 1, 0])
    assert out.data.tolist() == [[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]


def test_embedding_gradient_accumulates_repeated_rows():
    rng = np.random.default_rng(3)
    table = leaf(rng.normal(size=(3, 2)))
    weights = rng.normal(size=(3, 2))
    ag.sum_(ag.embedding_lookup(table, [1, 1, 0]) * weights).backward()
    f = lambda: float((table.data[[1, 1, 0]] * weights).sum())
    fd = numeric_grad(f, table.data)
    assert max_rel_err(table.grad, fd) <= 1e-6
    assert np.allclose(table.grad[1], weights[0] + weights[1])
    assert np.allclose(table.grad[2], 0.0)


def test_embedding_index_out_of_range():
    with pytest.raises(IndexError):
        ag.embedding_lookup(Tensor(np.zeros((2, 3))), [2])


# bce ----------------------------------------------------------------------


def test_bce_half_probability():
    assert scalar(ag.bce_loss(Tensor([0.5]), [1])) == pytest.approx(math.log(2.0), abs=1e-12)


def test_bce_perfect_prediction_limit():
    assert scalar(ag.bce_loss(Tensor([1.0 - 1e-12]), [1])) < 1e-6


def test_sigmoid_bce_logit_gradient_is_p_minus_y():
    z = leaf([0.3, -1.2, 2.0])
    y = np.array([1.0, 0.0, 0.0])
    ag.bce_loss(ag.sigmoid(z), y).backward()
    p = 1 / (1 + np.exp(-z.data))
    assert np.allclose(z.grad, (p - y) / 3, atol=1e-12)
    probe = z.data.copy()
    fd = numeric_grad(lambda: scalar(ag.bce_loss(ag.sigmoid(Tensor(probe)), y)), probe)
    assert max_rel_err(z.grad, fd) <= 1e-6


# adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": leaf([1.0, -2.0])}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, AdamState(learning_rate=0.1))
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-3])
    lr, eps = 0.01, 1e-8
    p = {"w": leaf(np.zeros(3))}
    adam_step(p, {"w": g}, AdamState(learning_rate=lr, eps=eps))
    # bias-corrected m = g, v = g^2 on the first step
    expected = -lr * g / (np.abs(g) + eps)
    assert np.allclose(p["w"].data, expected, rtol=1e-12)
    assert np.allclose(np.abs(p["w"].data), lr, rtol=1e-4)


def test_adam_is_deterministic():
    def run():
        p = {"w": leaf([0.5, 0.5])}
        s = AdamState(learning_rate=0.05)
        for g in ([1.0, -1.0], [0.2, 0.3]):
            adam_step(p, {"w": np.array(g)}, s)
        return p["w"].data

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": leaf([1.0])}, {"w": np.zeros(2)}, AdamState())


# grad_check ---------------------------------------------------------------


def test_grad_check_linear_function():
    params = {"a": leaf(np.arange(4.0)), "b": leaf(np.ones((2, 2)))}
    report = grad_check(lambda: ag.sum_(params["a"]) + ag.sum_(params["b"]), params, tolerance=1e-8)
    assert report.passed and report.max_error <= 1e-8


def test_grad_check_constant_function():
    params = {"a": leaf([1.0, 2.0])}
    report = grad_check(lambda: Tensor(3.0) + ag.sum_(params["a"]) * 0.0, params)
    assert report.max_error == 0.0


def test_grad_check_reports_rather_than_raises():
    params = {"a": leaf([1.0, 2.0])}

    def wrong():
        # analytic path sees x, numeric path sees x^2 via the raw data
        return ag.sum_(params["a"]) + Tensor(float((params["a"].data ** 2).sum()))

    report = grad_check(wrong, params)
    assert not report.passed


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_random_shapes(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 5, size=3)
    a = leaf(rng.normal(size=(m, k)))
    b = leaf(rng.normal(size=(k, n)))
    gamma = leaf(rng.normal(size=n))
    beta = leaf(rng.normal(size=n))
    table = leaf(rng.normal(size=(4, n)))
    idx = rng.integers(0, 4, size=m)
    w = rng.normal(size=(m, n))

    def f():
        h = ag.matmul(a, b)
        h = ag.layer_norm(h + ag.embedding_lookup(table, idx), gamma, beta)
        h = ag.softmax_rows(h) * w + ag.relu(h)
        return ag.bce_loss(ag.sigmoid(ag.mean(h, axis=-1)), (idx % 2))

    report = grad_check(f, {"a": a, "b": b, "gamma": gamma, "beta": beta, "table": table})
    assert report.max_error <= 1e-4, report.errors


def test_non_finite_is_an_error():
    with pytest.raises(ag.NonFiniteError), np.errstate(over="ignore"):
        ag.mul(Tensor([1e308]), Tensor([1e308]))


def test_float32_fast_path_agrees_with_float64():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 6))
    w = rng.normal(size=(6, 6))
    g, b = np.ones(6), np.zeros(6)

    def run(dt):
        h = ag.matmul(Tensor(x.astype(dt)), Tensor(w.astype(dt)))
        return ag.softmax_rows(ag.layer_norm(h, Tensor(g.astype(dt)), Tensor(b.astype(dt)))).data

    lo, hi = run(np.float32), run(np.float64)
    assert lo.dtype == np.float32
    assert max_rel_err(lo, hi, floor=1e-3) <= 1e-3
