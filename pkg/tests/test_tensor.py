import numpy as np
import pytest
from hypothesis import given, strategies as st

from kanlab.gradcheck import numeric_grad, relative_error
from kanlab.tensor import ShapeError, Tensor, concat, matmul, no_grad, stack


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def fd_check(build, arrays, h=1e-3, tol=1e-4):
    """Compare backward of sum(build(*leaves)) to central differences (64-bit)."""
    leaves = [leaf(a) for a in arrays]
    build(*leaves).sum().backward()

    def value():
        with no_grad():
            return float(build(*leaves).sum().data)

    for t in leaves:
        for idx in np.ndindex(t.shape):
            num = numeric_grad(value, t.data, idx, h)
            assert relative_error(t.grad[idx], num, floor=1e-6) < tol, (idx, t.grad[idx], num)


def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_product():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_fd(rng):
    fd_check(lambda a, b: a @ b, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


def test_square_derivative():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_shared_input_accumulates():
    x = leaf(1.5)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_needs_scalar_or_seed():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2).backward()
    (x * 2).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_grad_shape_matches_data(rng):
    a = leaf(rng.normal(size=(3, 1)))
    b = leaf(rng.normal(size=(1, 4)))
    (a * b + a).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_no_grad_records_nothing():
    x = leaf(2.0)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_retain_grad_on_intermediate():
    x = leaf([1.0, 2.0])
    y = (x * 3).retain_grad()
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data)
    np.testing.assert_allclose(x.grad, 18 * x.data)


def test_replay_is_bitwise_deterministic(rng):
    a0, b0 = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))

    def grads():
        a, b = leaf(a0), leaf(b0)
        ((a @ b).exp().sum() + (a * a).mean()).backward()
        return a.grad.tobytes(), b.grad.tobytes()

    assert grads() == grads()


@pytest.mark.parametrize("op", ["exp", "log", "sin", "cos", "sqrt", "sigmoid", "softplus"])
def test_unary_gradients_fd(op, rng):
    x = rng.uniform(0.2, 2.0, size=(3, 4))
    fd_check(lambda t: getattr(t, op)(), [x])


@pytest.mark.parametrize("build", [
    lambda a, b: a * b,
    lambda a, b: a / b,
    lambda a, b: a - b,
    lambda a, b: (a + b) ** 3,
    lambda a, b: a.reshape(4, 3).transpose() @ b.reshape(3, 4).T,
    lambda a, b: concat([a, b], axis=1).mean(axis=0),
    lambda a, b: stack([a, b], axis=0)[1, 1:, ::2],
])
def test_binary_and_structural_gradients_fd(build, rng):
    fd_check(build, [rng.uniform(0.5, 1.5, size=(3, 4)), rng.uniform(0.5, 1.5, size=(3, 4))])


def test_broadcast_gradient_fd(rng):
    fd_check(lambda a, b: a * b + b, [rng.normal(size=(4, 3)), rng.normal(size=(3,))])


def test_relu_gradient_away_from_kink():
    x = leaf([-1.0, 2.0])
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_item_and_repr():
    assert Tensor([[2.5]]).item() == 2.5
    assert "shape=(2,)" in repr(Tensor([1.0, 2.0]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_sum_gradient_is_ones(values):
    x = leaf(values)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(len(values)))
