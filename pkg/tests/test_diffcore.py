import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polspoof import diffcore as dc
from polspoof.errors import DimensionError, NonFiniteError
from polspoof.ledger import CostLedger
from polspoof.models import InitSpec, ModelSpec, init_weights


def _fd(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _setup(seed, widths=(3, 5, 4, 3), activation="tanh", loss="cross_entropy", bias=True, B=6):
    model = ModelSpec(widths, activation, loss, bias)
    W = init_weights(model, InitSpec(seed=seed, std=0.7))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((B, widths[0]))
    y = rng.integers(0, widths[-1], B)
    return model, W, X, y


def test_weight_vector_roundtrip():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([7.0, 8.0, 9.0])
    W = dc.WeightVector.from_layers([("W1", a), ("b1", b)])
    back = W.unflatten()
    assert np.array_equal(back[0], a) and np.array_equal(back[1], b)
    assert [n for n, _ in W.layer_slices()] == ["W1", "b1"]
    assert len(W) == 9


def test_weight_vector_rejects_bad_input():
    with pytest.raises(DimensionError):
        dc.WeightVector(np.zeros(5), (("W1", (2, 3)),))
    with pytest.raises(NonFiniteError):
        dc.WeightVector(np.array([0.0, np.nan]), (("b", (2,)),))


def test_weight_vector_is_immutable():
    W = dc.WeightVector(np.zeros(3), (("b", (3,)),))
    with pytest.raises(ValueError):
        W.values[0] = 1.0


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
@pytest.mark.parametrize("loss", ["cross_entropy", "squared_error"])
def test_weight_grad_matches_fd(activation, loss):
    model, W, X, y = _setup(0, activation=activation, loss=loss)
    _, g = dc.weight_grad(model, W, X, y)
    num = _fd(lambda w: dc.batch_loss(model, w, X, y), W.values)
    assert np.allclose(g, num, rtol=1e-5, atol=1e-8)


def test_no_hidden_layer_and_no_bias():
    model, W, X, y = _setup(1, widths=(4, 3), bias=False)
    _, g = dc.weight_grad(model, W, X, y)
    num = _fd(lambda w: dc.batch_loss(model, w, X, y), W.values)
    assert np.allclose(g, num, rtol=1e-5, atol=1e-8)


def test_input_grad_matches_fd():
    model, W, X, y = _setup(2)
    gx = dc.input_grad(model, W, X, y)
    num = _fd(lambda x: dc.batch_loss(model, W, x, y), X)
    assert np.allclose(gx, num, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("loss", ["cross_entropy", "squared_error"])
def test_mixed_vjp_matches_fd(loss):
    model, W, X, y = _setup(3, loss=loss)
    v = np.random.default_rng(0).standard_normal(len(W))
    got = dc.mixed_vjp(model, W, X, y, v)
    num = _fd(lambda x: float(v @ dc.weight_grad(model, W, x, y)[1]), X)
    assert np.allclose(got, num, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("objective", list(dc.ObjectiveKind))
def test_input_objective_grad_matches_fd(objective):
    model, W, X, y = _setup(4)
    rng = np.random.default_rng(5)
    R = 0.1 * rng.standard_normal(X.shape)
    kw = {}
    if objective is dc.ObjectiveKind.TARGET_DISTANCE:
        kw = {"target": W.values + 0.05 * rng.standard_normal(len(W)), "eta": 0.3}
    val, dR = dc.input_objective_grad(model, W, X, R, y, objective, 0.05, **kw)

    def f(r):
        return dc.input_objective_grad(model, W, X, r, y, objective, 0.05, **kw)[0]

    assert val == pytest.approx(f(R))
    assert np.allclose(dR, _fd(f, R), rtol=1e-5, atol=1e-8)


def test_objective_zero_noise_subgradient():
    model, W, X, y = _setup(5)
    val, dR = dc.input_objective_grad(model, W, X, np.zeros_like(X), y)
    assert np.all(np.isfinite(dR))
    assert val == pytest.approx(np.linalg.norm(dc.weight_grad(model, W, X, y)[1]))


def test_objective_requires_target_and_eta():
    model, W, X, y = _setup(6)
    with pytest.raises(ValueError):
        dc.input_objective_grad(model, W, X, np.zeros_like(X), y, dc.ObjectiveKind.TARGET_DISTANCE)
    with pytest.raises(DimensionError):
        dc.input_objective_grad(model, W, X, np.zeros((1, 1)), y)


def test_ledger_charges():
    model, W, X, y = _setup(7)
    led = CostLedger()
    dc.loss_grad(model, W, X, y, ledger=led)
    dc.input_objective_grad(model, W, X, np.zeros_like(X), y, ledger=led)
    assert (led.updates, led.opt_iterations, led.gradient_computations) == (1, 1, 4)
    other = CostLedger()
    with other.activate():
        dc.loss_grad(model, W, X, y)
        dc.weight_grad(model, W, X, y)  # unledgered
    assert other.gradient_computations == 1
    dc.loss_grad(model, W, X, y)  # nothing active: no error
    assert led.gradient_computations == 4


def test_ledger_rejects_negative():
    with pytest.raises(ValueError):
        CostLedger().add_updates(-1)


def test_batch_shape_errors():
    model, W, X, y = _setup(8)
    with pytest.raises(DimensionError):
        dc.weight_grad(model, W, X[:, :2], y)
    with pytest.raises(DimensionError):
        dc.weight_grad(model, W, X, y[:-1])


def test_sgd_update():
    W = dc.WeightVector(np.ones(3), (("b", (3,)),))
    assert np.allclose(dc.sgd_update(W, [1.0, 2.0, 3.0], 0.5).values, [0.5, 0.0, -0.5])
    with pytest.raises(ValueError):
        dc.sgd_update(W, np.zeros(3), 0.0)
    with pytest.raises(DimensionError):
        dc.sgd_update(W, np.zeros(2), 0.1)


def test_noise_is_seeded_per_step():
    g = np.zeros(4)
    nm = dc.NoiseModel(1e-3, 9)
    a, b = dc.inject_noise(g, nm, 3), dc.inject_noise(g, nm, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, dc.inject_noise(g, nm, 4))
    assert not np.array_equal(a, dc.inject_noise(g, dc.NoiseModel(1e-3, 10), 3))
    assert np.array_equal(dc.inject_noise(g, dc.NoiseModel(), 3), g)
    with pytest.raises(ValueError):
        dc.NoiseModel(-1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 3.0))
def test_grad_fd_property(seed, scale):
    model, W, X, y = _setup(seed, widths=(2, 4, 3))
    X = scale * X
    _, g = dc.weight_grad(model, W, X, y)
    num = _fd(lambda w: dc.batch_loss(model, w, X, y), W.values)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


def test_softplus_is_stable_for_large_inputs():
    model, W, X, y = _setup(9, activation="softplus")
    loss = dc.batch_loss(model, W, 1e4 * X, y)
    assert np.isfinite(loss)
