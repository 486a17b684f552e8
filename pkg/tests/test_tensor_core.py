import math

import numpy as np
import pytest

from promptseg.tensor_core import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)


def softmax_oracle(row):
    e = [math.exp(v) for v in row]
    s = sum(e)
    return [v / s for v in e]


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    t = Tape()
    out = t.matmul(t.const(np.eye(3)), t.const(a))
    assert np.array_equal(out.value, a)


def test_matmul_identity_and_zero_are_exact():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))
    t = Tape()
    A, B, I, Z = t.const(a), t.const(b), t.const(np.eye(4)), t.const(np.zeros((4, 4)))
    assert np.array_equal(t.matmul(t.matmul(A, I), B).value, t.matmul(A, t.matmul(I, B)).value)
    assert np.array_equal(t.matmul(t.matmul(A, Z), B).value, np.zeros((4, 4)))


def test_row_softmax_one_hot_scaled():
    t = Tape()
    out = t.row_softmax(t.const([[10.0, 0.0, 0.0]])).value[0]
    expected = softmax_oracle([10.0, 0.0, 0.0])
    assert np.allclose(out, expected, rtol=0, atol=1e-15)
    assert out[0] == pytest.approx(0.99991, abs=1e-5)
    assert out[1] == pytest.approx(0.000045, abs=1e-6)


def test_mse_self_is_zero_with_zero_gradient():
    w = Parameter("w", np.arange(6.0).reshape(2, 3))
    t = Tape()
    loss = t.mse(t.param(w), t.const(w.value.copy()))
    t.backward(loss)
    assert loss.value[0, 0] == 0.0
    assert np.array_equal(w.grad, np.zeros((2, 3)))


def test_mse_gradient_at_zero_weight():
    # loss = mean((W x - y)^2) with W = 0  ->  dL/dW = -2 y x^T / size
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 1))
    y = rng.normal(size=(2, 1))
    w = Parameter("w", np.zeros((2, 3)))
    t = Tape()
    t.backward(t.mse(t.matmul(t.param(w), t.const(x)), t.const(y)))
    assert np.allclose(w.grad, -2.0 * y @ x.T / y.size, rtol=1e-14, atol=1e-15)


def test_constant_loss_gives_zero_gradients():
    w = Parameter("w", np.ones((2, 2)))
    t = Tape()
    t.param(w)
    loss = t.mse(t.const([[1.0]]), t.const([[3.0]]))
    t.backward(loss)
    assert np.array_equal(w.grad, np.zeros((2, 2)))


def test_backward_before_forward_raises():
    t = Tape()
    other = Tape()
    node = other.const([[1.0]])
    with pytest.raises(RuntimeError):
        t.backward(node)


def test_backward_needs_scalar():
    t = Tape()
    with pytest.raises(ShapeError):
        t.backward(t.const(np.ones((2, 2))))


@pytest.mark.parametrize(
    "op, shapes",
    [
        ("matmul", [(2, 3), (4, 2)]),
        ("add", [(2, 3), (3, 2)]),
        ("hadamard", [(2, 2), (3, 3)]),
        ("mse", [(2, 2), (2, 3)]),
        ("bce", [(1, 2), (2, 1)]),
    ],
)
def test_shape_mismatch_rejected(op, shapes):
    t = Tape()
    a, b = (t.const(np.full(s, 0.5)) for s in shapes)
    with pytest.raises(ShapeError):
        getattr(t, op)(a, b)


def test_non_finite_rejected():
    t = Tape()
    big = t.const([[1e200]])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        t.matmul(big, big)
    with pytest.raises(NonFiniteError):
        t.const([[1.0, np.nan]])


def test_finite_values_with_overflowing_sum_accepted():
    t = Tape()
    with np.errstate(over="ignore"):
        node = t.const([[1e308, 1e308]])
    assert np.all(np.isfinite(node.value))


def test_bias_row_broadcast_gradient_sums_rows():
    b = Parameter("b", np.zeros((1, 3)))
    t = Tape()
    out = t.add(t.const(np.zeros((4, 3))), t.param(b))
    t.backward(t.mse(out, t.const(np.ones((4, 3)))))
    assert np.allclose(b.grad, np.full((1, 3), -2.0 * 4 / 12))


def _chain(kind, params):
    a, b = params

    def fn(t):
        A, B = t.param(a), t.param(b)
        if kind == "matmul":
            out = t.matmul(A, t.transpose(B))
            return t.mse(out, t.const(np.ones(out.shape) * 0.3))
        if kind == "add":
            return t.mse(t.add(A, B), t.const(np.zeros(A.shape)))
        if kind == "hadamard":
            return t.mse(t.hadamard(A, B), t.const(np.ones(A.shape)))
        if kind == "scale_relu":
            return t.mse(t.relu(t.scale(A, 1.7)), t.const(np.ones(A.shape) * 0.2))
        if kind == "softmax":
            return t.mse(t.row_softmax(t.hadamard(A, B)), t.const(np.full(A.shape, 1.0 / A.shape[1])))
        if kind == "sigmoid_bce":
            return t.bce(t.sigmoid(t.hadamard(A, B)), t.const(np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]], float)))
        if kind == "bce_targets":
            return t.bce(t.sigmoid(A), t.sigmoid(B))
        raise ValueError(kind)

    return fn


@pytest.mark.parametrize("kind", ["matmul", "add", "hadamard", "scale_relu", "softmax", "sigmoid_bce", "bce_targets"])
@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    a = Parameter("a", rng.normal(size=(3, 3)))
    b = Parameter("b", rng.normal(size=(3, 3)))
    results = grad_check(_chain(kind, (a, b)), [a, b], eps=1e-4)
    for r in results.values():
        assert r.max_rel_err < 1e-4, (kind, seed, r)


def test_linear_layer_grad_check_tight():
    rng = np.random.default_rng(3)
    w = Parameter("w", rng.normal(size=(4, 5)))
    bias = Parameter("b", rng.normal(size=(1, 4)))
    x = rng.normal(size=(6, 5))
    y = rng.normal(size=(6, 4))

    def fn(t):
        out = t.add(t.matmul(t.const(x), t.transpose(t.param(w))), t.param(bias))
        return t.mse(out, t.const(y))

    for r in grad_check(fn, [w, bias]).values():
        assert r.max_rel_err < 1e-6


def test_relu_smooth_region_passes():
    x = Parameter("x", np.array([[0.5, -0.7, 1.2, -2.0]]))

    def fn(t):
        return t.mse(t.relu(t.param(x)), t.const(np.zeros((1, 4))))

    r = grad_check(fn, [x], eps=1e-4)["x"]
    assert r.excluded == 0 and r.checked == 4 and r.max_rel_err < 1e-4


def test_relu_kink_is_excluded_not_failed():
    x = Parameter("x", np.array([[0.0, 1.0]]))

    def fn(t):
        return t.mse(t.relu(t.param(x)), t.const(np.zeros((1, 2))))

    r = grad_check(fn, [x], eps=1e-4)["x"]
    assert r.excluded == 1
    assert r.checked == 1
    assert r.max_rel_err < 1e-4


def test_tape_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        w = Parameter("w", rng.normal(size=(5, 5)))
        t = Tape()
        h = t.row_softmax(t.matmul(t.param(w), t.transpose(t.param(w))))
        return t.relu(t.add(h, t.const(rng.normal(size=(5, 5))))).value

    assert run().tobytes() == run().tobytes()


def test_nodes_reference_only_earlier_nodes():
    t = Tape()
    a = t.const(np.ones((2, 2)))
    b = t.relu(t.matmul(a, t.transpose(a)))
    t.mse(b, a)
    for node in t.nodes:
        assert all(i < node.index for i in node.inputs)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"layer.weight": np.arange(6.0).reshape(2, 3) / 7, "bias": np.array([[1.5, -2.25]])}
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout(tmp_path):
    import struct

    path = tmp_path / "c.bin"
    save_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"TCK1"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<I", raw, 12) == (2,)
    assert raw[16:18] == b"ab"
    assert struct.unpack_from("<II", raw, 18) == (1, 2)
    assert struct.unpack_from("<2d", raw, 26) == (1.0, 2.0)
    assert len(raw) == 42


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"a": np.ones((1, 1))})
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path, magic=b"LRA1")
