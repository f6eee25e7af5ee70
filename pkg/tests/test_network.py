import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaloss import autodiff as ad
from metaloss.network import MlpSpec, ParamVector, mlp_forward, xavier_init


def numpy_mlp(arrays, x, act=np.tanh):
    h = x
    n = len(arrays) // 2
    for k in range(n):
        h = h @ arrays[2 * k] + arrays[2 * k + 1]
        if k < n - 1:
            h = act(h)
    return h


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_flatten_roundtrip(din, dout, layers, width, seed):
    spec = MlpSpec(din, dout, layers, width)
    pv = xavier_init(spec, seed)
    arrays = pv.unflatten()
    assert [a.shape for a in arrays] == spec.shapes()
    np.testing.assert_array_equal(ParamVector.flatten(arrays).values, pv.values)


def test_layout_is_weight_then_bias():
    spec = MlpSpec(2, 1, 1, 3)
    pv = ParamVector(np.arange(13.0), spec.shapes())
    w0, b0, w1, b1 = pv.unflatten()
    np.testing.assert_array_equal(w0, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(b0, [6, 7, 8])
    np.testing.assert_array_equal(w1[:, 0], [9, 10, 11])
    assert b1[0] == 12
    assert pv.offsets == [0, 6, 9, 12, 13]


def test_wrong_length_rejected():
    with pytest.raises(ValueError, match="expected 13"):
        ParamVector(np.zeros(12), MlpSpec(2, 1, 1, 3).shapes())


def test_xavier_bounds_and_zero_bias():
    spec = MlpSpec(2, 1, 3, 20)
    arrays = xavier_init(spec, 7).unflatten()
    for a in arrays:
        if a.ndim == 2:
            assert np.all(np.abs(a) <= np.sqrt(6.0 / sum(a.shape)))
        else:
            assert np.all(a == 0.0)


def test_xavier_deterministic_per_seed():
    spec = MlpSpec(2, 1, 2, 5)
    np.testing.assert_array_equal(xavier_init(spec, 3).values, xavier_init(spec, 3).values)
    assert not np.array_equal(xavier_init(spec, 3).values, xavier_init(spec, 4).values)


def test_forward_matches_numpy():
    spec = MlpSpec(2, 2, 2, 7)
    arrays = xavier_init(spec, 1).unflatten()
    arrays = [a + 0.1 * np.random.default_rng(i).standard_normal(a.shape) for i, a in enumerate(arrays)]
    x = np.random.default_rng(9).uniform(-1, 1, (5, 2))
    out = mlp_forward(spec, [ad.var(a) for a in arrays], x)
    np.testing.assert_allclose(out.value, numpy_mlp(arrays, x), rtol=1e-14, atol=1e-14)


def test_softplus_output_is_positive():
    spec = MlpSpec(1, 1, 1, 4, output_activation="softplus")
    out = mlp_forward(spec, [ad.const(a) for a in xavier_init(spec, 0).unflatten()], np.linspace(-3, 3, 11)[:, None])
    assert np.all(out.value > 0)


def test_input_derivatives_match_differences():
    spec = MlpSpec(2, 1, 2, 6)
    theta = [ad.const(a) for a in xavier_init(spec, 2).unflatten()]
    x0 = np.array([[0.3, -0.4]])
    x = ad.var(x0)
    u = ad.sum(mlp_forward(spec, theta, x))
    (g,) = ad.grad(u, [x], create_graph=True)
    (gxx,) = ad.grad(g[0, 0], [x])

    def f(p):
        return float(ad.sum(mlp_forward(spec, theta, p)).value)

    h = 1e-4
    e0 = np.array([[h, 0.0]])
    fd1 = (f(x0 + e0) - f(x0 - e0)) / (2 * h)
    fd2 = (f(x0 + e0) - 2 * f(x0) + f(x0 - e0)) / h**2
    assert g.value[0, 0] == pytest.approx(fd1, abs=1e-8)
    assert gxx.value[0, 0] == pytest.approx(fd2, abs=1e-5)


def test_parameter_gradient_matches_differences():
    spec = MlpSpec(1, 1, 1, 3)
    pv = xavier_init(spec, 5)

    def f(flat):
        arrays = [ad.const(a) for a in ParamVector(flat, spec.shapes()).unflatten()]
        return float(ad.sum(mlp_forward(spec, arrays, np.array([[0.2], [0.9]])) ** 2).value)

    theta = pv.as_vars()
    grads = ad.grad(ad.sum(mlp_forward(spec, theta, np.array([[0.2], [0.9]])) ** 2), theta)
    flat_grad = np.concatenate([g.value.ravel() for g in grads])
    h = 1e-6
    fd = [(f(pv.values + h * e) - f(pv.values - h * e)) / (2 * h) for e in np.eye(len(pv))]
    np.testing.assert_allclose(flat_grad, fd, atol=1e-8)


@pytest.mark.parametrize(
    "kwargs",
    [dict(hidden_layers=0), dict(hidden_width=0), dict(input_dim=0), dict(activation="gelu"),
     dict(output_activation="exp")],
)
def test_invalid_spec(kwargs):
    base = dict(input_dim=1, output_dim=1, hidden_layers=1, hidden_width=2)
    base.update(kwargs)
    with pytest.raises(ValueError):
        MlpSpec(**base)


def test_forward_rejects_wrong_input_width():
    spec = MlpSpec(2, 1, 1, 2)
    with pytest.raises(ValueError, match="columns"):
        mlp_forward(spec, xavier_init(spec, 0).unflatten(), np.zeros((3, 1)))


def test_forward_rejects_wrong_parameter_count():
    spec = MlpSpec(2, 1, 1, 2)
    with pytest.raises(ValueError, match="count"):
        mlp_forward(spec, xavier_init(spec, 0).unflatten()[:-1], np.zeros((3, 2)))


def test_xavier_unit_fans():
    w0, _, w1, _ = xavier_init(MlpSpec(1, 1, 1, 1), 0).unflatten()
    assert abs(w0[0, 0]) <= np.sqrt(3.0) and abs(w1[0, 0]) <= np.sqrt(3.0)


def test_xavier_variance():
    w = np.concatenate([xavier_init(MlpSpec(40, 1, 1, 40), s).unflatten()[0].ravel() for s in range(7)])
    assert w.size >= 10000
    assert np.var(w) == pytest.approx(2.0 / 80.0, rel=0.1)


def test_zero_parameters_give_zero_output():
    spec = MlpSpec(2, 1, 2, 5)
    zeros = [np.zeros(s) for s in spec.shapes()]
    out = mlp_forward(spec, [ad.const(z) for z in zeros], np.random.default_rng(0).normal(size=(4, 2)))
    np.testing.assert_array_equal(out.value, np.zeros((4, 1)))


def test_unit_relu_path_is_identity_on_positive_inputs():
    spec = MlpSpec(1, 1, 1, 1, activation="relu")
    theta = [ad.const(np.ones((1, 1))), ad.const(np.zeros(1)), ad.const(np.ones((1, 1))), ad.const(np.zeros(1))]
    x = np.linspace(0, 3, 7)[:, None]
    np.testing.assert_array_equal(mlp_forward(spec, theta, x).value, x)
