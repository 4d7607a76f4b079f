import math

import numpy as np
import pytest

from unitslab.params import ParamSet, params_to_bytes, sgd_step
from unitslab.tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    conv2d,
    detach,
    masked_bce,
    mean_reduce,
    relu,
    scale,
    sigmoid,
)


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        Tensor([float("inf")])


def test_tensor_data_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0


def test_relu_definition():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_symmetry_point():
    assert sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_conv2d_all_ones_center_pixel():
    # hand convolution: the center of a 5x5 ones image under a 3x3 ones kernel
    # sums a full 3x3 neighbourhood
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    y = conv2d(x, w, b).data[0, 0]
    assert y[2, 2] == 9.0
    assert y[0, 0] == 4.0  # corner sees a 2x2 neighbourhood


def test_conv2d_shape_errors_name_the_op():
    x = Tensor(np.ones((1, 2, 4, 4)))
    w = Tensor(np.ones((1, 3, 3, 3)))
    b = Tensor(np.zeros(1))
    with pytest.raises(ShapeError, match="conv2d"):
        conv2d(x, w, b)


def test_masked_bce_half_prediction_is_ln2():
    loss = masked_bce(Tensor([0.5]), Tensor([1.0]), Tensor([1.0]))
    assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)


def test_masked_bce_rejects_soft_targets():
    with pytest.raises(ValueError):
        masked_bce(Tensor([0.5]), Tensor([0.3]), Tensor([1.0]))


def test_masked_bce_empty_mask_is_zero():
    assert masked_bce(Tensor([0.5]), Tensor([1.0]), Tensor([0.0])).item() == 0.0


def test_mean_gradient_is_uniform():
    x = Tensor(np.arange(4.0), requires_grad=True, name="x")
    with Tape():
        loss = mean_reduce(x)
        grads = backward(loss)
    assert grads["x"].data.tolist() == [0.25, 0.25, 0.25, 0.25]


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    with Tape():
        y = relu(x)
        with pytest.raises(ShapeError):
            backward(y)


def test_backward_requires_live_tape():
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    loss = mean_reduce(x)  # no tape active: nothing recorded
    with pytest.raises(TapeError):
        backward(loss)


def test_unnamed_leaf_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(TapeError):
            relu(x)


def test_duplicate_leaf_names_are_rejected():
    a = Tensor(np.ones(2), requires_grad=True, name="p")
    b = Tensor(np.ones(2), requires_grad=True, name="p")
    with Tape():
        with pytest.raises(TapeError):
            add(a, b)


def test_detach_is_value_identical_and_grad_free():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, name="x")
    d = detach(x)
    assert d.data.tobytes() == x.data.tobytes()
    assert not d.requires_grad and d.node_id is None
    assert x.requires_grad  # source unmodified


def test_detach_annihilates_gradients():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x")
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True, name="y")
    with Tape():
        hidden = scale(x, 2.0)
        blocked = detach(hidden)
        loss = mean_reduce(add(blocked, y))
        grads = backward(loss)
    assert np.array_equal(grads["x"].data, np.zeros(2))
    assert np.array_equal(grads["y"].data, np.full(2, 0.5))


def test_gradients_accumulate_over_shared_inputs():
    x = Tensor(np.array([2.0]), requires_grad=True, name="x")
    with Tape():
        loss = mean_reduce(add(x, x))
        grads = backward(loss)
    assert grads["x"].data.tolist() == [2.0]


# ---------------------------------------------------------------------------
# finite-difference oracle


def _numeric_grad(f, arrays: dict[str, np.ndarray], name: str, h: float = 1e-5) -> np.ndarray:
    base = arrays[name]
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = {k: v.copy() for k, v in arrays.items()}
        minus = {k: v.copy() for k, v in arrays.items()}
        plus[name].reshape(-1)[i] += h
        minus[name].reshape(-1)[i] -= h
        flat[i] = (f(plus) - f(minus)) / (2 * h)
    return grad


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _loss_of(op_builder):
    def f(arrays: dict[str, np.ndarray]) -> float:
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        with Tape():
            return op_builder(tensors).item()

    return f


def _analytic(op_builder, arrays):
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape():
        loss = op_builder(tensors)
        return backward(loss)


PRIMITIVE_CASES = {
    "add": lambda t: mean_reduce(sigmoid(add(t["a"], t["b"]))),
    "scale": lambda t: mean_reduce(sigmoid(scale(t["a"], -1.7))),
    "relu": lambda t: mean_reduce(relu(t["a"])),
    "sigmoid": lambda t: mean_reduce(sigmoid(t["a"])),
}


@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(case):
    rng = np.random.default_rng(42)
    build = PRIMITIVE_CASES[case]
    for _ in range(20):
        shape = tuple(rng.integers(1, 9, size=2))
        arrays = {
            "a": rng.normal(0.0, 1.0, shape),
            "b": rng.normal(0.0, 1.0, shape),
        }
        if case == "relu":  # keep values away from the kink
            arrays["a"] = np.where(np.abs(arrays["a"]) < 0.05, 0.2, arrays["a"])
        arrays = {k: v for k, v in arrays.items() if k == "a" or case == "add"}
        grads = _analytic(build, arrays)
        for name in arrays:
            numeric = _numeric_grad(_loss_of(build), arrays, name)
            assert _max_rel_error(grads[name].data, numeric) < 1e-6


def test_masked_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        shape = tuple(rng.integers(1, 9, size=2))
        pred = rng.uniform(0.05, 0.95, shape)
        target = (rng.random(shape) < 0.4).astype(float)
        mask = (rng.random(shape) < 0.7).astype(float)
        if mask.sum() == 0:
            mask.reshape(-1)[0] = 1.0
        build = lambda t: masked_bce(t["pred"], Tensor(target), Tensor(mask))
        arrays = {"pred": pred}
        grads = _analytic(build, arrays)
        numeric = _numeric_grad(_loss_of(build), arrays, "pred")
        assert _max_rel_error(grads["pred"].data, numeric) < 1e-6


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        arrays = {
            "x": rng.normal(0.0, 1.0, (n, cin, h, w)),
            "w": rng.normal(0.0, 0.5, (cout, cin, 3, 3)),
            "b": rng.normal(0.0, 0.5, (cout,)),
        }
        build = lambda t: mean_reduce(sigmoid(conv2d(t["x"], t["w"], t["b"])))
        grads = _analytic(build, arrays)
        for name in arrays:
            numeric = _numeric_grad(_loss_of(build), arrays, name)
            assert _max_rel_error(grads[name].data, numeric) < 1e-6


def test_two_layer_conv_net_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    x_const = rng.random((1, 1, 6, 6))
    target = (rng.random((1, 1, 6, 6)) < 0.3).astype(float)
    mask = np.ones_like(target)

    def build(t):
        h = relu(conv2d(Tensor(x_const), t["w0"], t["b0"]))
        out = sigmoid(conv2d(h, t["w1"], t["b1"]))
        return masked_bce(out, Tensor(target), Tensor(mask))

    arrays = {
        "w0": rng.normal(0.0, 0.4, (3, 1, 3, 3)),
        "b0": rng.normal(0.0, 0.2, (3,)),
        "w1": rng.normal(0.0, 0.4, (1, 3, 3, 3)),
        "b1": rng.normal(0.0, 0.2, (1,)),
    }
    grads = _analytic(build, arrays)
    for name in arrays:
        numeric = _numeric_grad(_loss_of(build), arrays, name)
        assert _max_rel_error(grads[name].data, numeric) < 1e-6


def test_operations_are_deterministic():
    rng = np.random.default_rng(3)
    x = rng.random((2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r1 = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    r2 = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert r1.tobytes() == r2.tobytes()
