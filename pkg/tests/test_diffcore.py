import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypersignal import diffcore as dc
from hypersignal.diffcore import Tensor


def param(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def test_forward_examples():
    assert dc.relu([-1.0, 2.0]).data.tolist() == [0.0, 2.0]
    assert dc.softmax([0.0, 0.0]).data.tolist() == [0.5, 0.5]
    assert dc.l2_norm([3.0, 4.0]).item() == 5.0
    assert dc.l1_norm([0.3, -0.2]).item() == pytest.approx(0.5)
    assert dc.sigmoid([0.0]).data[0] == 0.5


def test_mse_gradient_hand_value():
    w = param(1.0)
    loss = dc.mse(dc.reshape(w * 2.0, (1,)), np.zeros(1))
    loss.backward()
    # d/dw (2w)^2 = 8w
    assert w.grad == pytest.approx(8.0)


def test_l1_gradient_is_sign():
    p = param([0.3, -0.2])
    dc.l1_norm(p).backward()
    assert p.grad.tolist() == [1.0, -1.0]


def test_shared_subexpression_accumulates_exactly():
    x = param(0.7)
    (x + x).backward()
    assert x.grad == 2.0


def test_repeated_backward_accumulates():
    x = param([1.0, 2.0])
    dc.tsum(x * x).backward()
    dc.tsum(x * x).backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_nonscalar_loss_rejected():
    x = param([1.0, 2.0])
    with pytest.raises(dc.NonScalarLoss):
        dc.backward(x * 2.0)


def test_shape_mismatch():
    with pytest.raises(dc.ShapeMismatch):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.ShapeMismatch):
        dc.add(np.ones(3), np.ones(4))
    with pytest.raises(dc.ShapeMismatch):
        dc.mse(np.ones(3), np.ones(4))


def test_no_grad_records_nothing():
    x = param([1.0])
    with dc.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_gradcheck_sum_of_squares():
    rng = np.random.default_rng(0)
    x = param(rng.uniform(-1, 1, size=(3, 4)))
    res = dc.gradcheck(lambda t: dc.tsum(t * t), x)
    assert res.max_rel_error < 1e-6
    assert res.checked == 12 and not res.excluded


def test_gradcheck_excludes_relu_kink():
    x = param([0.0, 0.5, -0.5])
    res = dc.gradcheck(lambda t: dc.tsum(dc.relu(t)), x)
    assert res.excluded == [(0,)]
    assert res.checked == 2
    assert res.max_rel_error < 1e-8


def test_gradcheck_detects_wrong_gradient():
    x = param([0.3, -0.4])

    def bad_square(t):
        out = dc.mul(t, t.data)  # treats one factor as a constant: gradient off by 2x
        return dc.tsum(out)

    assert dc.gradcheck(bad_square, x).max_rel_error > 0.4


def test_softmax_properties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        z = rng.normal(scale=5, size=(3, 6))
        s = dc.softmax(z, axis=-1).data
        assert np.all(s > 0)
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)


def _unary_ops():
    return {
        "relu": lambda t: dc.relu(t),
        "sigmoid": dc.sigmoid,
        "tanh": dc.tanh,
        "exp": dc.exp,
        "log": lambda t: dc.log(dc.add(dc.mul(t, t), 0.5)),
        "sqrt": lambda t: dc.sqrt(dc.add(dc.mul(t, t), 0.5)),
        "softmax": lambda t: dc.softmax(t, axis=-1),
        "log_softmax": lambda t: dc.log_softmax(t, axis=0),
        "abs": dc.abs_,
        "neg": dc.neg,
        "pow": lambda t: dc.power(dc.add(dc.mul(t, t), 1.0), 1.5),
        "l2_norm_rows": lambda t: dc.l2_norm(t, axis=-1),
        "l1_norm": lambda t: dc.l1_norm(t),
        "mean_axis": lambda t: dc.mean(t, axis=0),
        "transpose": lambda t: dc.transpose(t),
        "reshape": lambda t: dc.reshape(t, (-1,)),
        "take": lambda t: dc.take(t, (np.array([0, 2, 2]), np.array([1, 0, 1]))),
        "concat": lambda t: dc.concat([t, dc.scale(t, 2.0)], axis=0),
    }


def _weights(shape, seed=7):
    return np.random.default_rng(seed).normal(size=shape)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    op=st.sampled_from(sorted(_unary_ops())),
)
def test_gradcheck_every_unary_op(seed, op):
    rng = np.random.default_rng(seed)
    x = param(rng.uniform(-1, 1, size=(3, 4)))
    f = _unary_ops()[op]

    def loss(t):
        out = f(t)
        return dc.tsum(dc.mul(out, _weights(out.shape)))

    assert dc.gradcheck(loss, x).max_rel_error < 1e-3


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    op=st.sampled_from(["add", "sub", "mul", "div", "matmul", "bmatmul", "minimum", "mse", "vecmat"]),
)
def test_gradcheck_every_binary_op(seed, op):
    rng = np.random.default_rng(seed)
    a_shape, b_shape = {
        "matmul": ((3, 4), (4, 2)),
        "bmatmul": ((5, 3, 4), (4, 2)),
        "vecmat": ((4,), (4, 2)),
        "mse": ((3, 4), (3, 4)),
    }.get(op, ((3, 4), (1, 4)))
    a = param(rng.uniform(-1, 1, size=a_shape))
    b = param(rng.uniform(-1, 1, size=b_shape))
    if op == "div":
        b.data += np.sign(b.data) * 1.0
    fn = {
        "add": dc.add,
        "sub": dc.sub,
        "mul": dc.mul,
        "div": dc.div,
        "matmul": dc.matmul,
        "bmatmul": dc.matmul,
        "vecmat": dc.matmul,
        "minimum": dc.minimum,
        "mse": dc.mse,
    }[op]

    def loss(_):
        out = fn(a, b)
        return dc.tsum(dc.mul(out, _weights(out.shape)))

    assert dc.gradcheck(loss, a).max_rel_error < 1e-3
    assert dc.gradcheck(loss, b).max_rel_error < 1e-3


def test_adam_zero_gradient_leaves_parameter():
    p = param([0.5, -0.5])
    opt = dc.Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [0.5, -0.5]


def test_adam_first_step_hand_value():
    p = param([0.0])
    opt = dc.Adam([p], lr=0.01)
    p.grad = np.ones(1)
    opt.step()
    # t=1: m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
    assert p.grad is None


def test_adam_constant_gradient_descends():
    p = param([1.0])
    opt = dc.Adam([p], lr=0.01)
    values = []
    for _ in range(50):
        p.grad = np.full(1, 3.0)
        opt.step()
        values.append(p.data[0])
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_missing_grad():
    p = param([1.0])
    with pytest.raises(dc.MissingGrad):
        dc.Adam([p], lr=0.01).step()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"a": param(rng.normal(size=(2, 3))), "b/c": param(rng.normal(size=(4,)))}
    path = tmp_path / "ckpt.npz"
    dc.save_tensors(path, tensors)
    back = dc.load_tensors(path)
    assert set(back) == set(tensors)
    for k, t in tensors.items():
        assert back[k].dtype == np.float64
        assert np.array_equal(back[k], t.data)
