import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stimpute.diffcore import (ContainerError, IndexMap, NumericError, ShapeError, TapeError, Tensor,
                               backward, gradient_check, load, no_grad, ops, save)
from stimpute.diffcore.container import from_bytes, to_bytes

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def test_matmul_identity():
    out = ops.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_activations_at_zero():
    assert ops.sigmoid(Tensor(np.zeros(1))).item() == 0.5
    assert ops.tanh(Tensor(np.zeros(1))).item() == 0.0


def test_scatter_sum_hand_case():
    out = ops.scatter_sum(Tensor(np.array([[2.0], [5.0]])), IndexMap(np.array([0, 0]), 3))
    np.testing.assert_array_equal(out.data.ravel(), [7, 0, 0])


def test_outer_product_gradient():
    W = leaf([[1.0, 2.0], [3.0, 4.0]])
    x = np.array([[5.0, 7.0]])
    grads = backward(ops.total(ops.matmul(Tensor(x), W)), [W])
    # d/dW_kj sum_j (x W)_j = x_k
    np.testing.assert_array_equal(grads[id(W)], [[5, 5], [7, 7]])


def test_unused_leaf_gets_zero():
    a, unused = leaf([1.0, 2.0]), leaf([[3.0]])
    grads = backward(ops.total(ops.mul(a, a)), [a, unused])
    np.testing.assert_array_equal(grads[id(unused)], [[0.0]])
    np.testing.assert_array_equal(grads[id(a)], [2.0, 4.0])


def test_backward_without_tape():
    with pytest.raises(TapeError):
        backward(Tensor(np.array(1.0)))


def test_backward_needs_scalar():
    with pytest.raises(TapeError):
        backward(ops.mul(leaf([1.0, 2.0]), 2.0))


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_pinball_kink_subgradient(tau):
    pred = leaf(np.array([[0.3]]))
    g = backward(ops.pinball(pred, np.array([0.3]), np.array([1.0]), [tau]), [pred])[id(pred)]
    assert g.item() == pytest.approx(-tau)


def test_pinball_hand_value():
    loss = ops.pinball(Tensor(np.full((1, 3), 0.5)), np.array([1.0]), np.array([1.0]), [0.1, 0.5, 0.9])
    assert loss.item() == pytest.approx(0.25, abs=1e-15)


def test_pinball_empty_mask():
    with pytest.raises(ValueError):
        ops.pinball(Tensor(np.zeros((2, 1))), np.zeros(2), np.zeros(2), [0.5])


def test_pinball_median_is_half_mae(rng):
    pred, y = rng.uniform(size=(6, 1)), rng.uniform(size=6)
    m = (rng.uniform(size=6) > 0.3).astype(float)
    m[0] = 1
    loss = ops.pinball(Tensor(pred), y, m, [0.5]).item()
    assert loss == pytest.approx(0.5 * np.abs(pred[:, 0] - y)[m > 0].mean(), rel=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        IndexMap(np.array([0, 5]), 3)


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        ops.tanh(Tensor(np.array([np.nan])))


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with no_grad():
        out = ops.mul(a, a)
    assert not out.requires_grad


def test_gradient_check_quadratic():
    theta = leaf(np.random.default_rng(0).normal(size=(3, 2)))
    A = np.random.default_rng(1).normal(size=(2, 2))
    f = lambda: ops.total(ops.mul(ops.matmul(theta, A), theta))
    assert gradient_check(f, theta, 1e-5) < 1e-7


def test_gradient_check_constant():
    theta = leaf([1.0, 2.0])
    assert gradient_check(lambda: ops.total(Tensor(np.ones(3))), theta) == 0.0


def test_gradient_check_rejects_vector():
    theta = leaf([1.0, 2.0])
    with pytest.raises(TapeError):
        gradient_check(lambda: ops.mul(theta, 2.0), theta)


# every primitive against central differences
def _primitive_cases(rng):
    x = leaf(rng.uniform(-1, 1, (4, 3)))
    w = rng.uniform(-1, 1, (3, 2))
    dst = IndexMap(np.array([0, 0, 1, 2, 3, 3]), 4)
    src = IndexMap(np.array([1, 2, 0, 3, 0, 2]), 4)
    diff = __import__("scipy.sparse", fromlist=["csr_matrix"]).csr_matrix(rng.uniform(size=(4, 4)))
    cond = rng.uniform(size=(4, 3)) > 0.5
    weights = rng.uniform(size=(4, 3))
    return x, {
        "add": lambda: ops.add(x, Tensor(weights)),
        "sub": lambda: ops.sub(Tensor(weights), x),
        "mul": lambda: ops.mul(x, x),
        "matmul": lambda: ops.matmul(x, Tensor(w)),
        "linear": lambda: ops.linear(x, Tensor(w), Tensor(np.ones(2))),
        "sigmoid": lambda: ops.sigmoid(x),
        "tanh": lambda: ops.tanh(x),
        "concat": lambda: ops.concat([x, ops.mul(x, x)], axis=-1),
        "stack": lambda: ops.stack([x, ops.tanh(x)], axis=0),
        "index": lambda: ops.index(x, 2, axis=0),
        "columns": lambda: ops.columns(x, 1, 3),
        "broadcast": lambda: ops.broadcast_to(ops.index(x, 0), (5, 3)),
        "reshape": lambda: ops.reshape(x, (3, 4)),
        "where": lambda: ops.where(cond, x, ops.mul(x, 3.0)),
        "mean": lambda: ops.mean(ops.mul(x, x)),
        "gather": lambda: ops.gather(x, src),
        "scatter": lambda: ops.scatter_sum(ops.gather(x, src), dst),
        "edge_pair": lambda: ops.edge_pair(x, ops.tanh(x), dst, src),
        "propagate": lambda: ops.propagate(diff, x),
    }


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "sigmoid", "tanh", "concat",
                                  "stack", "index", "columns", "broadcast", "reshape", "where",
                                  "mean", "gather", "scatter", "edge_pair", "propagate"])
def test_primitive_gradients(name):
    x, cases = _primitive_cases(np.random.default_rng(7))
    probe = np.random.default_rng(8).normal(size=cases[name]().shape)
    f = lambda: ops.total(ops.mul(cases[name](), Tensor(probe)))
    assert gradient_check(f, x, 1e-5) < 1e-4


def test_matmul_weight_gradient():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(2, 4, 3)))
    w = leaf(rng.normal(size=(3, 2)))
    assert gradient_check(lambda: ops.total(ops.tanh(ops.matmul(a, w))), w) < 1e-6


def test_pinball_gradient_away_from_kinks():
    rng = np.random.default_rng(3)
    pred = leaf(rng.uniform(size=(5, 3)))
    y = rng.uniform(size=5)
    assert np.min(np.abs(pred.data - y[:, None])) > 1e-6
    f = lambda: ops.pinball(pred, y, np.array([1, 0, 1, 1, 0.0]), [0.1, 0.5, 0.9])
    assert gradient_check(f, pred, 1e-7) < 1e-4


@given(st.permutations(list(range(6))))
@settings(max_examples=50, deadline=None)
def test_scatter_is_order_invariant(perm):
    rng = np.random.default_rng(0)
    msgs = rng.normal(size=(6, 2))
    idx = np.array([0, 1, 0, 2, 1, 0])
    base = ops.scatter_sum(Tensor(msgs), IndexMap(idx, 3)).data
    p = np.array(perm)
    shuffled = ops.scatter_sum(Tensor(msgs[p]), IndexMap(idx[p], 3)).data
    np.testing.assert_allclose(shuffled, base, rtol=0, atol=1e-12)
    # with (target, source)-sorted edges the order is canonical, hence bit-identical
    order = np.lexsort((p, idx[p]))
    canon = ops.scatter_sum(Tensor(msgs[p][order]), IndexMap(idx[p][order], 3)).data
    assert np.array_equal(canon, ops.scatter_sum(Tensor(msgs[np.lexsort((np.arange(6), idx))]),
                                                 IndexMap(np.sort(idx, kind="stable"), 3)).data)


@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite))
@settings(max_examples=50, deadline=None)
def test_container_round_trip(a):
    assert np.array_equal(from_bytes(to_bytes(a)), a)


def test_container_layout(tmp_path):
    a = np.arange(6, dtype=float).reshape(2, 3)
    save(tmp_path / "a.sti", a)
    blob = (tmp_path / "a.sti").read_bytes()
    assert blob[:4] == b"STI1" and blob[4] == 0 and blob[5] == 2
    assert int.from_bytes(blob[6:14], "little") == 2 and int.from_bytes(blob[14:22], "little") == 3
    assert np.array_equal(load(tmp_path / "a.sti"), a)


def test_container_rejects_garbage():
    with pytest.raises(ContainerError):
        from_bytes(b"XXXX\x00\x00")
    with pytest.raises(ContainerError):
        from_bytes(to_bytes(np.ones(3))[:-1])
