import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtdqn.errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    TapeStateError,
)
from mtdqn.numerics import (
    AdamState,
    CosineSchedule,
    Tape,
    Tensor,
    activation,
    adam_step,
    add,
    add_bias,
    backward,
    bce_with_logits,
    check_gradients,
    clip_gradients,
    concat,
    cosine_lr,
    elementwise,
    finite_diff_grad,
    global_norm,
    layer_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    rowwise_softmax,
    square,
    sub,
    take,
    transpose,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_value():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert not matmul(a, Tensor(np.zeros((4, 2)))).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, np.einsum("bij,bjk->bik", a, b))


# --- softmax ----------------------------------------------------------------

def test_softmax_equal_logits():
    np.testing.assert_allclose(rowwise_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_ln2():
    out = rowwise_softmax(Tensor([[math.log(2.0), 0.0]])).data
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)


@given(arrays(np.float64, (3, 4), elements=finite), finite)
def test_softmax_rows_and_shift(x, c):
    y = rowwise_softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(rowwise_softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    y = rowwise_softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
    np.testing.assert_allclose(y, [[1.0, 0.0, 0.0]])


# --- activations / elementwise ---------------------------------------------

def test_activation_points():
    assert activation("sigmoid", Tensor(0.0)).item() == 0.5
    assert activation("tanh", Tensor(0.0)).item() == 0.0
    assert activation("relu", Tensor([-3.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_activation_unknown_kind():
    with pytest.raises(ConfigurationError):
        activation("gelu", Tensor([1.0]))


def test_elementwise_cases():
    x = Tensor([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(mul(x, Tensor(np.ones(3))).data, x.data)
    assert add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert not sub(x, x).data.any()
    assert mul(x, 2.0).data.tolist() == [3.0, -4.0, 6.0]


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ConfigurationError):
        elementwise("div", Tensor([1.0]), Tensor([1.0]))


# --- concat / mean / layer norm --------------------------------------------

def test_concat_cases():
    v = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(concat([v], 0).data, v.data)
    out = concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    assert out.data.tolist() == [[1.0, 3.0], [2.0, 4.0]]
    assert concat([Tensor(np.ones(5)), Tensor(np.ones(7))], 0).shape == (12,)
    with pytest.raises(DimensionError):
        concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], 1)


def test_reduce_mean_cases():
    assert reduce_mean(Tensor([[2.0, 2.0], [2.0, 2.0]]), 1).data.tolist() == [2.0, 2.0]
    assert reduce_mean(Tensor([1.0, 3.0]), 0).item() == 2.0
    assert reduce_mean(Tensor([7.0]), 0).item() == 7.0
    with pytest.raises(DegenerateInputError):
        reduce_mean(Tensor(np.zeros((2, 0))), 1)


def test_layer_norm_cases():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full(4, 3.0)), ones, zeros).data, 0.0)
    out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)
    bias = Tensor([0.5, -0.1, 0.2, 0.4])
    out = layer_norm(Tensor([1.0, 4.0, -2.0, 0.3]), Tensor(np.full(4, 2.0)), bias).data
    assert out.mean() == pytest.approx(bias.data.mean(), abs=1e-12)
    with pytest.raises(DegenerateInputError):
        layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]))


def test_nonfinite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# --- backward / tape --------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = mul(x, x)
    backward(loss, tape)
    assert x.grad == pytest.approx(6.0)
    # the finite-difference oracle agrees
    assert finite_diff_grad(lambda v: float(v * v), 3.0) == pytest.approx(6.0, abs=1e-4)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_accumulates_shared_subexpressions():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = mul(x, 3.0)
        loss = add(y, y)
    tape.backward(loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as tape:
        loss = reduce_sum(x)
    tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.backward(loss)
    with pytest.raises(TapeStateError):
        with tape:
            pass


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = mul(x, 2.0)
    assert not y.requires_grad


def test_finite_diff_basics():
    np.testing.assert_allclose(finite_diff_grad(lambda v: 4.0, np.ones(3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v.sum()), np.ones(4)), 1.0, atol=1e-9)
    with pytest.raises(ContractError):
        finite_diff_grad(lambda v: 0.0, np.ones(2), eps=0.0)


# --- gradient suite: every differentiable op vs finite differences ----------

def _weights(rng, shape):
    return rng.normal(size=shape)


def _op_cases():
    """(name, builder) where builder(rng) -> (fn, inputs)."""

    def linear_readout(rng, shape):
        c = _weights(rng, shape)
        return lambda t: reduce_sum(mul(t, Tensor(c)))

    def c_matmul(rng):
        ro = linear_readout(rng, (3, 2))
        return lambda a, b: ro(matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]

    def c_bmatmul(rng):
        ro = linear_readout(rng, (2, 3, 2))
        return lambda a, b: ro(matmul(a, b)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]

    def c_softmax(rng):
        ro = linear_readout(rng, (3, 4))
        return lambda x: ro(rowwise_softmax(x)), [rng.normal(size=(3, 4))]

    def c_act(kind):
        def build(rng):
            ro = linear_readout(rng, (5,))
            x = rng.normal(size=5)
            if kind == "relu":
                # keep away from the kink so central differences are valid
                x = np.where(np.abs(x) < 0.05, 0.5, x)
            return lambda t: ro(activation(kind, t)), [x]
        return build

    def c_elem(kind):
        def build(rng):
            ro = linear_readout(rng, (2, 3))
            return (lambda x, y: ro(elementwise(kind, x, y)),
                    [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])
        return build

    def c_scalar_mul(rng):
        ro = linear_readout(rng, (4,))
        return lambda s, x: ro(mul(s, x)), [np.array(rng.normal()), rng.normal(size=4)]

    def c_bias(rng):
        ro = linear_readout(rng, (3, 4))
        return lambda x, b: ro(add_bias(x, b)), [rng.normal(size=(3, 4)), rng.normal(size=4)]

    def c_concat(rng):
        ro = linear_readout(rng, (2, 5))
        return (lambda a, b: ro(concat([a, b], axis=1)),
                [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))])

    def c_mean(rng):
        ro = linear_readout(rng, (3,))
        return lambda x: ro(reduce_mean(x, axis=1)), [rng.normal(size=(3, 4))]

    def c_sum(rng):
        ro = linear_readout(rng, (4,))
        return lambda x: ro(reduce_sum(x, axis=0)), [rng.normal(size=(3, 4))]

    def c_layer_norm(rng):
        ro = linear_readout(rng, (2, 5))
        return (lambda x, g, b: ro(layer_norm(x, g, b)),
                [rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)])

    def c_reshape_transpose(rng):
        ro = linear_readout(rng, (4, 3, 2))
        return lambda x: ro(transpose(reshape(x, (2, 3, 4)), (2, 1, 0))), [rng.normal(size=(6, 4))]

    def c_take(rng):
        ro = linear_readout(rng, (4, 3))
        return lambda x: ro(take(x, [2, 0, 2, 1], axis=0)), [rng.normal(size=(3, 3))]

    def c_square(rng):
        ro = linear_readout(rng, (4,))
        return lambda x: ro(square(x)), [rng.normal(size=4)]

    def c_bce(rng):
        y = (rng.random(6) < 0.5).astype(float)
        return lambda z: bce_with_logits(z, y), [rng.normal(size=6) * 2]

    return [
        ("matmul", c_matmul),
        ("matmul_batched", c_bmatmul),
        ("rowwise_softmax", c_softmax),
        ("sigmoid", c_act("sigmoid")),
        ("tanh", c_act("tanh")),
        ("relu", c_act("relu")),
        ("add", c_elem("add")),
        ("sub", c_elem("sub")),
        ("mul", c_elem("mul")),
        ("scalar_mul", c_scalar_mul),
        ("add_bias", c_bias),
        ("concat", c_concat),
        ("reduce_mean", c_mean),
        ("reduce_sum", c_sum),
        ("layer_norm", c_layer_norm),
        ("reshape_transpose", c_reshape_transpose),
        ("take", c_take),
        ("square", c_square),
        ("bce_with_logits", c_bce),
    ]


@pytest.mark.parametrize("name,build", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_op_gradients_match_finite_differences(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        fn, inputs = build(rng)
        assert check_gradients(fn, inputs) < 1e-6, name


# --- optimizer / schedule / clipping ---------------------------------------

def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_hand_value():
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g/(|g| + eps)
    p = {"w": Tensor([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.001)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.001 * 1.0 / (1.0 + 1e-8), abs=1e-15)
    assert p["w"].data[0] == pytest.approx(0.999, abs=1e-9)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": Tensor([1.0, 2.0])}, {"w": np.ones(3)}, AdamState(), 1e-3)


def test_cosine_schedule_points():
    sched = CosineSchedule(lr0=0.001, lr_min=1e-5, total_steps=100)
    assert cosine_lr(sched, 0) == pytest.approx(0.001)
    assert cosine_lr(sched, 100) == pytest.approx(1e-5)
    assert cosine_lr(sched, 50) == pytest.approx((0.001 + 1e-5) / 2)
    assert cosine_lr(sched, -5) == cosine_lr(sched, 0)
    assert cosine_lr(sched, 500) == cosine_lr(sched, 100)


@given(st.integers(1, 2000), st.floats(1e-6, 1e-1), st.floats(0, 1))
def test_cosine_bounded_and_monotone(total, lr0, frac):
    sched = CosineSchedule(lr0=lr0, lr_min=lr0 * frac, total_steps=total)
    lrs = [cosine_lr(sched, s) for s in range(0, total + 1, max(total // 50, 1))]
    assert all(sched.lr_min - 1e-15 <= v <= lr0 + 1e-15 for v in lrs)
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_clip_cases():
    g = {"a": np.array([0.1, 0.2])}
    np.testing.assert_array_equal(clip_gradients(g, 5.0)["a"], g["a"])
    np.testing.assert_allclose(clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8])
    assert not clip_gradients({"a": np.zeros(3)}, 1.0)["a"].any()


@settings(max_examples=200)
@given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
def test_clip_norm_bound(g, max_norm):
    clipped = clip_gradients({"a": g[:3], "b": g[3:]}, max_norm)
    assert global_norm(clipped) <= max_norm + 1e-12 * max(1.0, max_norm)


def test_ops_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    r1 = rowwise_softmax(matmul(Tensor(a), Tensor(b))).data
    r2 = rowwise_softmax(matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()
