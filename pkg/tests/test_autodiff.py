import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgml.autodiff import (Adam, GraphError, Op, ParameterStore, ShapeError, Tape, adam_step,
                           backward, forward, sgd_step)

from helpers import fd_gradient, max_rel_error


def test_relu_softmax_matmul_examples():
    t = Tape()
    assert t.value(t.relu(t.constant([[-1.0, 2.0]]))).tolist() == [[0.0, 2.0]]
    np.testing.assert_allclose(t.value(t.softmax(t.constant([[0.0, 0.0]]))), [[0.5, 0.5]])
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(t.value(t.matmul(t.constant(np.eye(3)), t.constant(a))), a)


def test_forward_replays_tape():
    t = Tape()
    x = t.param("x", [[1.0, -2.0]])
    w = t.param("w", [[2.0], [1.0]])
    out = t.relu(t.matmul(x, w))
    vals = forward(t.ops, {"x": [[3.0, 1.0]], "w": [[2.0], [1.0]]})
    assert vals[out].tolist() == [[7.0]]
    assert forward(t.ops, [[[1.0, -2.0]], [[2.0], [1.0]]])[out].tolist() == [[0.0]]


def test_shape_error_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as exc:
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    assert "matmul" in str(exc.value) and "(2, 3)" in str(exc.value)


def test_sum_and_square_gradients():
    t = Tape()
    p = t.param("p", [1.0, 2.0, 3.0])
    assert backward(t, t.sum(p))["p"].tolist() == [1.0, 1.0, 1.0]
    t = Tape()
    p = t.param("p", [2.0])
    assert backward(t, t.sum(t.mul(p, p)))["p"].tolist() == [4.0]


def test_backward_rejects_nonscalar_and_cycles():
    t = Tape()
    p = t.param("p", [1.0, 2.0])
    with pytest.raises(GraphError):
        backward(t, t.relu(p))
    t = Tape()
    p = t.param("p", [1.0])
    s = t.sum(p)
    # splice in an op that reads a node that comes after it
    t.ops[1] = Op("sum", (2,), {})
    with pytest.raises(GraphError):
        backward(t, s)


def test_untouched_parameter_gets_zero_gradient():
    t = Tape()
    p = t.param("p", [1.0])
    t.param("q", [[1.0, 2.0]])
    g = backward(t, t.sum(p))
    assert g["q"].tolist() == [[0.0, 0.0]]


def _mlp_loss(params, x, y):
    t = Tape()
    pv = {n: t.param(n, v) for n, v in params.items()}
    h = t.relu(t.linear(t.constant(x), pv["w1"], pv["b1"]))
    logits = t.linear(h, pv["w2"], pv["b2"])
    return t, t.cross_entropy(logits, y)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 4))
    y = rng.integers(3, size=6)
    params = {"w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5),
              "w2": rng.normal(size=(5, 3)), "b2": rng.normal(size=3)}
    t, loss = _mlp_loss(params, x, y)
    analytic = backward(t, loss)

    def f(p):
        tt, ll = _mlp_loss(p, x, y)
        return float(tt.value(ll)[0])

    assert max_rel_error(analytic, fd_gradient(f, params)) < 1e-4


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(2)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 3)),
              "c": rng.normal(size=(3, 4)), "v": rng.normal(size=4)}

    def build(p):
        t = Tape()
        pv = {n: t.param(n, v) for n, v in p.items()}
        a, b, c, v = pv["a"], pv["b"], pv["c"], pv["v"]
        x = t.add_bias(t.add(t.mul(a, c), t.scale(t.neg(c), 0.5)), v)
        y = t.softmax(t.matmul(x, b))                      # (3, 3)
        z = t.concat(y, t.relu(a))                          # (3, 7)
        d = t.sqdist(z, t.concat(y, c))                     # (3, 3)
        ctx = t.matmul(t.constant(np.ones((3, 1))), t.mean(x, axis=0))
        return t, t.add(t.sum(d), t.mean(t.mul(ctx, x)))

    t, loss = build(params)
    analytic = backward(t, loss)

    def f(p):
        tt, ll = build(p)
        return float(np.asarray(tt.value(ll)).ravel()[0])

    assert max_rel_error(analytic, fd_gradient(f, params)) < 1e-4


def test_sgd_examples_and_errors():
    out = sgd_step({"p": np.array([1.0, 1.0])}, {"p": np.array([1.0, 2.0])}, 0.5)
    assert out["p"].tolist() == [0.5, 0.0]
    p = np.array([3.0, -1.0])
    assert np.array_equal(sgd_step({"p": p}, {"p": np.zeros(2)}, 0.1)["p"], p)
    with pytest.raises(ValueError):
        sgd_step({"p": p}, {"p": p}, 0.0)
    with pytest.raises(ValueError):
        sgd_step({"p": p}, {"q": p}, 0.1)


def test_adam_first_step_and_zero_gradient():
    opt = Adam(1e-3)
    out = opt.step({"p": np.array([0.5])}, {"p": np.array([1.0])})
    np.testing.assert_allclose(out["p"] - 0.5, [-1e-3], rtol=1e-6)
    opt = Adam(0.1)
    p = {"p": np.array([1.0, -2.0])}
    for _ in range(10):
        p = adam_step(opt, p, {"p": np.zeros(2)})
    assert p["p"].tolist() == [1.0, -2.0]


def test_adam_minimizes_square():
    opt = Adam(0.1)
    p = {"p": np.array([1.0])}
    for _ in range(100):
        p = opt.step(p, {"p": 2 * p["p"]})
    assert abs(p["p"][0]) < 0.1


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(lr=-1.0), dict(lr=1e-3, beta1=1.0),
                                dict(lr=1e-3, beta2=-0.1), dict(lr=1e-3, eps=0.0),
                                dict(lr=1e-3, weight_decay=-1.0)])
def test_adam_rejects_bad_hyperparameters(kw):
    with pytest.raises(ValueError):
        Adam(**kw)


def test_adam_weight_decay_shrinks_toward_zero():
    opt = Adam(0.1, weight_decay=0.5)
    out = opt.step({"p": np.array([2.0])}, {"p": np.array([0.0])})
    assert out["p"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_parameter_store_groups():
    s = ParameterStore()
    s.add("encoder", "a", np.ones(2))
    s.add("head", "b", np.ones(3), trainable=False)
    s.add("knowledge", "c", np.ones(1))
    assert s.names(["encoder", "knowledge"]) == ["a", "c"]
    assert s.names(trainable_only=True) == ["a", "c"]
    with pytest.raises(ValueError):
        s.add("encoder", "a", np.ones(2))
    with pytest.raises(ValueError):
        s.add("other", "z", np.ones(2))
    with pytest.raises(ShapeError):
        s.update({"a": np.ones(3)})
    c = s.copy()
    c.update({"a": np.zeros(2)})
    assert s["a"].tolist() == [1.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(xs):
    t = Tape()
    p = t.value(t.softmax(t.constant([xs])))
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()
