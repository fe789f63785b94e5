import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ebgame import numerics as nx
from ebgame.errors import ConfigError, ContractError, ShapeError
from ebgame.numerics import AdamWState, LrSchedule, Tensor, lr_at

from helpers import max_rel_error, numeric_grad

RNG = np.random.default_rng(1234)


def check_grads(build, *shapes, positive=False, tol=1e-4):
    """Compare backward() against central differences for sum(w * build(*inputs))."""
    rng = np.random.default_rng(sum(int(np.prod(s)) for s in shapes) + len(shapes))
    inputs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    out_shape = build(*[Tensor(x) for x in inputs]).shape
    weights = rng.standard_normal(out_shape)

    def value():
        return float((build(*[Tensor(x) for x in inputs]).data * weights).sum())

    ts = [Tensor(x, requires_grad=True) for x in inputs]
    nx.tsum(nx.mul(build(*ts), weights)).backward()
    for t, x in zip(ts, inputs):
        num = numeric_grad(value, x)
        assert max_rel_error(t.grad, num) < tol


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = RNG.standard_normal((2, 2))
    np.testing.assert_array_equal(nx.matmul(np.eye(2), a).data, a)


def test_matmul_hand_value():
    out = nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_zero():
    a = RNG.standard_normal((3, 4))
    np.testing.assert_array_equal(nx.matmul(a, np.zeros((4, 2))).data, np.zeros((3, 2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    for _ in range(20):
        a, b, c = (RNG.standard_normal(s) for s in [(3, 4), (4, 5), (5, 2)])
        left = nx.matmul(nx.matmul(a, b), c).data
        right = nx.matmul(a, nx.matmul(b, c)).data
        assert np.abs(left - right).max() <= 1e-9 * np.abs(left).max()


def test_matmul_records_graph_only_with_grad():
    a = Tensor(np.ones((2, 2)))
    assert not nx.matmul(a, a).requires_grad
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    out = nx.matmul(a, b)
    assert out.requires_grad and out.op == "matmul"


# --- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(np.zeros(3), 0).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(nx.softmax([0.0, math.log(2.0)], 0).data, [1 / 3, 2 / 3], atol=1e-15)


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift(x, c):
    y = nx.softmax(x, axis=-1).data
    assert np.all(y > 0)
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12
    y2 = nx.softmax(x + c, axis=-1).data
    assert np.abs(y - y2).max() < 1e-12
    np.testing.assert_array_equal(y.argmax(-1), y2.argmax(-1))


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        nx.softmax(np.zeros((2, 3)), axis=2)


# --- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row():
    out = nx.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_normalised():
    out = nx.layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_zero_mean():
    out = nx.layer_norm(RNG.standard_normal((5, 7)) * 10 + 3, np.ones(7), np.zeros(7))
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-10


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


# --- gelu ---------------------------------------------------------------------

def test_gelu_points():
    assert nx.gelu(0.0).item() == 0.0
    assert abs(nx.gelu(10.0).item() - 10.0) < 1e-6
    assert abs(nx.gelu(-10.0).item()) < 1e-6


def test_gelu_constants():
    x = 0.7
    expected = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert nx.gelu(x).item() == pytest.approx(expected, abs=1e-15)


# --- attention ----------------------------------------------------------------

def _attn_weights(dim, rng):
    w = {}
    for name in "qkvo":
        w[f"w{name}"] = Tensor(rng.standard_normal((dim, dim)) * 0.3)
        w[f"b{name}"] = Tensor(rng.standard_normal(dim) * 0.1)
    return w


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(0)
    w = _attn_weights(8, rng)
    x = rng.standard_normal((2, 1, 8))
    out = nx.multi_head_attention(x, x, x, 2, w).data
    v = x @ w["wv"].data + w["bv"].data
    np.testing.assert_allclose(out, v @ w["wo"].data + w["bo"].data, atol=1e-12)


def test_attention_identical_keys_uniform():
    rng = np.random.default_rng(1)
    w = _attn_weights(4, rng)
    q = rng.standard_normal((1, 3, 4))
    k = np.repeat(rng.standard_normal((1, 1, 4)), 5, axis=1)
    v = rng.standard_normal((1, 5, 4))
    out = nx.multi_head_attention(q, k, v, 2, w).data
    vp = (v @ w["wv"].data + w["bv"].data).mean(axis=1, keepdims=True)
    expected = np.repeat(vp @ w["wo"].data + w["bo"].data, 3, axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_shapes_and_errors():
    rng = np.random.default_rng(2)
    w = _attn_weights(6, rng)
    q = rng.standard_normal((2, 4, 6))
    kv = rng.standard_normal((2, 7, 6))
    assert nx.multi_head_attention(q, kv, kv, 3, w).shape == q.shape
    assert nx.multi_head_attention(q[0], kv[0], kv[0], 3, w).shape == q[0].shape
    with pytest.raises(ConfigError):
        nx.multi_head_attention(q, kv, kv, 4, w)
    with pytest.raises(ShapeError):
        nx.multi_head_attention(q, kv, kv[:, :3], 3, w)


# --- gradients ----------------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_independent_parameter():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([5.0], requires_grad=True)
    loss = nx.tsum(x * 3.0) + nx.tsum(p * 0.0)
    loss.backward()
    np.testing.assert_array_equal(p.grad, [0.0])


def test_backward_accumulates_on_fan_out():
    x = Tensor([2.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])
    (x * 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        nx.log(Tensor([0.0]))


@pytest.mark.parametrize("name,build,shapes,positive", [
    ("add", lambda a, b: a + b, [(3, 4), (4,)], False),
    ("sub", lambda a, b: a - b, [(3, 1), (3, 4)], False),
    ("mul", lambda a, b: a * b, [(2, 3), (2, 3)], False),
    ("div", lambda a, b: a / b, [(2, 3), (3,)], True),
    ("pow", lambda a: nx.power(a, 3.0), [(4,)], False),
    ("exp", nx.exp, [(3, 2)], False),
    ("log", nx.log, [(3, 2)], True),
    ("abs", nx.tabs, [(5,)], True),
    ("clip", lambda a: nx.clip(a, 0.8, 1.7), [(6,)], True),
    ("sigmoid", nx.sigmoid, [(3, 3)], False),
    ("gelu", nx.gelu, [(3, 3)], False),
    ("sum", lambda a: nx.tsum(a, axis=1), [(3, 4)], False),
    ("mean", lambda a: nx.mean(a, axis=0, keepdims=True), [(3, 4)], False),
    ("reshape", lambda a: nx.reshape(a, (6, 2)), [(3, 4)], False),
    ("transpose", lambda a: nx.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), [(2, 3, 2), (2, 1, 2)], False),
    ("gather", lambda a: nx.gather(a, np.array([[2, 0], [1, 1]])), [(2, 3, 2)], False),
    ("matmul", nx.matmul, [(3, 4), (4, 2)], False),
    ("batched_matmul", nx.matmul, [(2, 3, 4), (4, 2)], False),
    ("softmax", lambda a: nx.softmax(a, axis=-1), [(3, 5)], False),
    ("layer_norm", lambda a, g, b: nx.layer_norm(a, g, b), [(3, 5), (5,), (5,)], False),
])
def test_op_gradients(name, build, shapes, positive):
    check_grads(build, *shapes, positive=positive)


def test_attention_gradients():
    rng = np.random.default_rng(5)
    names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    shapes = [(4, 4) if n[0] == "w" else (4,) for n in names]

    def build(x, *ws):
        return nx.multi_head_attention(x, x, x, 2, dict(zip(names, ws)))

    check_grads(build, (2, 3, 4), *shapes)


def test_mlp_gradient_against_finite_differences():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((5, 4))
    params = [rng.standard_normal(s) * 0.5 for s in [(4, 6), (6,), (6, 6), (6,), (6, 1), (1,)]]

    def forward(ps):
        h = nx.gelu(nx.linear(x, ps[0], ps[1]))
        h = nx.gelu(nx.linear(h, ps[2], ps[3]))
        return nx.mean(nx.power(nx.linear(h, ps[4], ps[5]), 2))

    ts = [Tensor(p, requires_grad=True) for p in params]
    forward(ts).backward()
    for t, p in zip(ts, params):
        num = numeric_grad(lambda: forward([Tensor(q) for q in params]).item(), p)
        assert max_rel_error(t.grad, num) < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    w = _attn_weights(8, rng)
    x = rng.standard_normal((3, 5, 8))
    a = nx.multi_head_attention(x, x, x, 4, w).data
    b = nx.multi_head_attention(x, x, x, 4, w).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# --- AdamW --------------------------------------------------------------------

def test_adamw_zero_grad_no_decay():
    p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
    p["w"].grad = np.zeros(2)
    nx.adamw_step(p, AdamWState(weight_decay=0.0), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_decay_only():
    p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
    p["w"].grad = np.zeros(2)
    nx.adamw_step(p, AdamWState(weight_decay=0.5), lr=0.1)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


@pytest.mark.parametrize("g", [3.0, -0.25])
def test_adamw_first_step_is_sign(g):
    p = {"w": Tensor([0.5], requires_grad=True)}
    p["w"].grad = np.array([g])
    st_ = AdamWState(weight_decay=0.0)
    nx.adamw_step(p, st_, lr=0.01)
    assert p["w"].data[0] == pytest.approx(0.5 - 0.01 * np.sign(g), abs=1e-8)
    assert st_.step_count == 1


def test_adamw_lr_zero_identity():
    rng = np.random.default_rng(0)
    p = {"a": Tensor(rng.standard_normal((3, 2)), True), "b": Tensor(rng.standard_normal(4), True)}
    before = {k: v.data.copy() for k, v in p.items()}
    st_ = AdamWState(weight_decay=0.1)
    for i in range(3):
        for v in p.values():
            v.grad = rng.standard_normal(v.shape)
        nx.adamw_step(p, st_, lr=0.0)
        assert st_.step_count == i + 1
    for k in p:
        np.testing.assert_array_equal(p[k].data, before[k])
        assert st_.m[k].shape == p[k].shape


def test_adamw_shape_error():
    p = {"w": Tensor([1.0, 2.0], True)}
    with pytest.raises(ShapeError):
        nx.adamw_step(p, AdamWState(), 0.1, grads={"w": np.zeros(3)})


# --- schedule -----------------------------------------------------------------

def test_schedule_points():
    s = LrSchedule(1e-3, 100, 300)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 100) == pytest.approx(1e-3, abs=1e-12)
    assert lr_at(s, 200) == pytest.approx(5e-4, abs=1e-12)
    assert lr_at(s, 300) == pytest.approx(0.0, abs=1e-12)


def test_schedule_non_negative_and_bounded():
    s = LrSchedule(2.0, 7, 50)
    vals = [lr_at(s, i) for i in range(51)]
    assert min(vals) >= 0.0 and max(vals) <= 2.0


def test_schedule_errors():
    s = LrSchedule(1.0, 0, 10)
    assert lr_at(s, 0) == 1.0
    with pytest.raises(ContractError):
        lr_at(s, 11)
    with pytest.raises(ConfigError):
        LrSchedule(1.0, 10, 10)
