import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdpnet import diffcore as dc

from oracles import fd_gradient, max_rel_err


def test_linear_identity():
    x = dc.tensor(np.array([[1.0, 0.0]]))
    y = dc.linear(x, dc.tensor(np.eye(2)), dc.tensor(np.zeros(2)))
    assert np.array_equal(y.data, [[1.0, 0.0]])


def test_linear_scalar_affine():
    y = dc.linear(dc.tensor([[2.0]]), dc.tensor([[3.0]]), dc.tensor([1.0]))
    assert np.array_equal(y.data, [[7.0]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError) as exc:
        dc.linear(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((4, 2))),
                  dc.tensor(np.zeros(2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_linear_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = dc.tensor(rng.standard_normal((3, 4)))
    W = dc.param(rng.standard_normal((4, 5)))
    b = dc.param(rng.standard_normal(5))

    loss = dc.sum_all(dc.linear(x, W, b))
    loss.backward()
    analytic = W.grad.copy()

    with dc.no_grad():
        numeric = fd_gradient(
            lambda: dc.sum_all(dc.linear(x, W, b)).item(), W.data, step=1e-5)
    assert max_rel_err(analytic, numeric) < 1e-6


def test_softplus_values():
    y = dc.softplus(dc.tensor([0.0, 50.0, -50.0]))
    assert abs(y.data[0] - math.log(2.0)) < 1e-12
    assert y.data[1] == pytest.approx(50.0 + math.exp(-50.0))
    assert y.data[2] == pytest.approx(math.exp(-50.0), rel=1e-9)
    assert (y.data > 0).all()


def test_row_softmax_uniform_and_stability():
    assert np.allclose(dc.row_softmax(dc.tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = dc.row_softmax(dc.tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    assert big[0, 0] > 1.0 - 1e-12 and big[0, 1] < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)))
def test_row_softmax_rows_sum_to_one(x):
    y = dc.row_softmax(dc.tensor(x)).data
    assert np.abs(y.sum(axis=1) - 1.0).max() <= 1e-12


def test_row_softmax_rank_check():
    with pytest.raises(dc.ShapeError):
        dc.row_softmax(dc.tensor(np.zeros(3)))


def test_cross_entropy_uniform_logits():
    loss = dc.cross_entropy(dc.tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_confident_correct():
    loss = dc.cross_entropy(dc.tensor([10.0, -10.0]), 0)
    assert loss.item() == pytest.approx(math.exp(-20.0), rel=1e-6)


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        dc.cross_entropy(dc.tensor([0.0, 1.0]), 2)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    logits = dc.param(rng.standard_normal(6))
    loss = dc.cross_entropy(logits, 3)
    loss.backward()
    p = np.exp(logits.data - logits.data.max())
    p /= p.sum()
    p[3] -= 1.0
    assert np.allclose(logits.grad, p, atol=1e-12)

    with dc.no_grad():
        numeric = fd_gradient(lambda: dc.cross_entropy(logits, 3).item(),
                              logits.data, step=1e-5)
    assert max_rel_err(logits.grad, numeric) < 1e-6


def test_adam_zero_gradient_is_identity():
    store = dc.ParamStore()
    w = store.add("w", np.array([1.0, -2.0, 3.0]))
    before = w.data.copy()
    w.grad = np.zeros(3)
    dc.adam_step(store, lr=0.1)
    assert np.array_equal(w.data, before)


def test_adam_first_step_magnitude_is_learning_rate():
    store = dc.ParamStore()
    w = store.add("w", np.array([0.0, 0.0]))
    w.grad = np.array([1e-3, -7.0])
    dc.adam_step(store, lr=0.01)
    # bias correction makes the first step ~ lr * sign(g)
    assert np.allclose(np.abs(w.data), 0.01, rtol=1e-4)
    assert w.data[0] < 0 < w.data[1]
    assert w.grad is None  # zeroed afterwards


def test_adam_monotone_decrease_on_quadratic():
    store = dc.ParamStore()
    w = store.add("w", np.array([5.0]))
    prev = (float(w.data[0]) - 3.0) ** 2
    for _ in range(100):
        w.grad = np.array([2.0 * (float(w.data[0]) - 3.0)])
        dc.adam_step(store, lr=0.01)
        cur = (float(w.data[0]) - 3.0) ** 2
        assert cur < prev
        prev = cur


def test_grad_check_exact_for_affine_loss():
    rng = np.random.default_rng(2)
    store = dc.ParamStore()
    W = store.add("W", rng.standard_normal((3, 2)))
    b = store.add("b", rng.standard_normal(2))
    x = dc.tensor(rng.standard_normal((4, 3)))
    # central differences have zero truncation on an affine loss, so a larger
    # step only suppresses float roundoff
    err = dc.grad_check(lambda: dc.sum_all(dc.linear(x, W, b)), store, step=1e-3)
    assert err < 1e-10


def test_grad_check_rejects_zero_step():
    store = dc.ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(ValueError):
        dc.grad_check(lambda: dc.sum_all(store["w"]), store, step=0.0)


def test_grad_check_rejects_non_finite_loss():
    store = dc.ParamStore()
    store.add("w", np.array([np.inf]))
    with pytest.raises(dc.NumericError):
        dc.grad_check(lambda: dc.sum_all(store["w"]), store, step=1e-5)


def _fd_for_op(build, x, n_points, tol=1e-6, step=1e-5):
    """Gradient-check an op at every coordinate of a random input."""
    p = dc.param(x)
    loss = build(p)
    loss.backward()
    analytic = p.grad.copy()
    with dc.no_grad():
        numeric = fd_gradient(lambda: build(p).item(), p.data, step=step)
    assert max_rel_err(analytic, numeric) < tol
    return x.size


def test_every_primitive_matches_finite_differences_at_100_points():
    rng = np.random.default_rng(3)
    proj = rng.standard_normal((4, 3))
    other = rng.standard_normal((5, 4))
    mix_rng = np.random.default_rng(99)
    mixers = {}
    checked = 0

    def weighted(t):
        # fixed weighted sum keeps the downstream loss non-symmetric
        key = t.data.shape
        if key not in mixers:
            mixers[key] = mix_rng.standard_normal(key)
        return dc.sum_all(dc.mul_const(t, mixers[key]))

    mul_other = dc.tensor(rng.standard_normal((6, 3)))
    add_bias = dc.tensor(rng.standard_normal(3))
    sub_left = dc.tensor(rng.standard_normal((4, 3)))
    cat_cols = dc.tensor(rng.standard_normal((3, 2)))
    cat_rows = dc.tensor(rng.standard_normal((1, 4)))

    checked += _fd_for_op(lambda p: dc.sum_all(dc.matmul(p, dc.tensor(proj))),
                          rng.standard_normal((5, 4)), 20)
    checked += _fd_for_op(lambda p: dc.sum_all(dc.matmul(dc.tensor(other), p)),
                          rng.standard_normal((4, 3)), 12)
    checked += _fd_for_op(lambda p: dc.sum_all(dc.mul(p, mul_other)),
                          rng.standard_normal((6, 3)), 18)
    checked += _fd_for_op(lambda p: dc.sum_all(dc.add(p, add_bias)),
                          rng.standard_normal((4, 3)), 12)
    checked += _fd_for_op(lambda p: dc.sum_all(dc.sub(sub_left, p)),
                          rng.standard_normal((4, 3)), 12)
    # keep relu inputs away from the kink
    relu_in = rng.standard_normal((4, 4))
    relu_in[np.abs(relu_in) < 1e-2] = 0.5
    checked += _fd_for_op(lambda p: weighted(dc.relu(p)), relu_in, 16)
    checked += _fd_for_op(lambda p: weighted(dc.tanh_act(p)), rng.standard_normal((3, 4)), 12)
    checked += _fd_for_op(lambda p: weighted(dc.softplus(p)), rng.standard_normal((3, 4)), 12)
    checked += _fd_for_op(lambda p: weighted(dc.row_softmax(p)), rng.standard_normal((3, 4)), 12)
    checked += _fd_for_op(lambda p: weighted(dc.take_rows(p, np.array([0, 2, 2]))),
                          rng.standard_normal((3, 4)), 12)
    checked += _fd_for_op(lambda p: dc.sum_all(dc.gather_elems(p, np.array([0, 1, 1]),
                                                               np.array([2, 0, 3]))),
                          rng.standard_normal((2, 4)), 8)
    colmax_in = rng.standard_normal((5, 3)) * 3.0
    checked += _fd_for_op(lambda p: weighted(dc.col_max(p)), colmax_in, 15)
    checked += _fd_for_op(lambda p: weighted(dc.concat_cols([p, cat_cols])),
                          rng.standard_normal((3, 2)), 6)
    checked += _fd_for_op(lambda p: weighted(dc.concat_rows([p, cat_rows])),
                          rng.standard_normal((2, 4)), 8)
    assert checked >= 100


def test_forward_is_pure_function_of_inputs():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 4))
    W = rng.standard_normal((4, 4))

    def run():
        return dc.row_softmax(dc.relu(dc.matmul(dc.tensor(x), dc.tensor(W)))).data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_concurrent_eval_matches_sequential():
    rng = np.random.default_rng(5)
    W = dc.tensor(rng.standard_normal((6, 6)))
    inputs = [rng.standard_normal((3, 6)) for _ in range(16)]

    def evaluate(x):
        with dc.no_grad():
            return dc.row_softmax(dc.matmul(dc.tensor(x), W)).data

    sequential = [evaluate(x) for x in inputs]
    with ThreadPoolExecutor(max_workers=4) as pool:
        concurrent = list(pool.map(evaluate, inputs))
    for a, b in zip(sequential, concurrent):
        assert a.tobytes() == b.tobytes()


def test_clip_grad_norm():
    store = dc.ParamStore()
    w = store.add("w", np.zeros(3))
    w.grad = np.array([3.0, 4.0, 0.0])
    norm = dc.clip_grad_norm(store, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(w.grad, [0.6, 0.8, 0.0])
    w.grad = np.array([np.inf, 0.0, 0.0])
    with pytest.raises(dc.NumericError):
        dc.clip_grad_norm(store, max_norm=1.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    store = dc.ParamStore()
    store.add("alpha", rng.standard_normal((3, 4)))
    store.add("beta.gamma", rng.standard_normal(7))
    store.add("scalarish", rng.standard_normal((1, 1)))
    path = str(tmp_path / "model.gdpn")
    dc.save_checkpoint(store, path)
    loaded = dc.load_checkpoint(path)
    assert loaded.names() == store.names()
    for name in store.names():
        assert loaded[name].data.tobytes() == store[name].data.tobytes()
        assert loaded[name].data.shape == store[name].data.shape


def test_checkpoint_magic_and_version(tmp_path):
    path = tmp_path / "bad.gdpn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        dc.load_checkpoint(str(path))
