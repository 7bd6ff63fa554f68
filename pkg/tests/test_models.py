import numpy as np
import pytest

from polspoof.data import make_blobs
from polspoof.errors import ModelSpecError
from polspoof.models import InitSpec, ModelSpec, evaluate, init_weights, predict


def test_model_spec_shapes():
    m = ModelSpec((4, 6, 3))
    assert m.shapes == (("W1", (4, 6)), ("b1", (6,)), ("W2", (6, 3)), ("b2", (3,)))
    assert m.n_params == 4 * 6 + 6 + 6 * 3 + 3
    assert ModelSpec((4, 3), bias=False).n_params == 12
    assert ModelSpec.from_dict(m.to_dict()) == m


@pytest.mark.parametrize("kw", [
    {"widths": (4,)},
    {"widths": (4, 0, 2)},
    {"widths": (4, 2), "activation": "relu"},
    {"widths": (4, 2), "loss": "hinge"},
    {"widths": (4, 1)},
])
def test_model_spec_rejects(kw):
    with pytest.raises(ModelSpecError):
        ModelSpec(**kw)


def test_squared_error_allows_one_output():
    assert ModelSpec((4, 1), loss="squared_error").classes == 1


def test_unflatten_size_check():
    with pytest.raises(ModelSpecError):
        ModelSpec((2, 2)).unflatten(np.zeros(3))


def test_init_is_seeded():
    m = ModelSpec((5, 7, 2))
    a = init_weights(m, InitSpec(seed=3))
    assert a == init_weights(m, InitSpec(seed=3))
    assert a != init_weights(m, InitSpec(seed=4))


def test_default_std_is_inverse_sqrt_fan_in():
    m = ModelSpec((400, 300, 2))
    W = init_weights(m, InitSpec(seed=0))
    w1 = W.values[W.layer_slices()[0][1]]
    assert np.std(w1) == pytest.approx(1 / np.sqrt(400), rel=0.02)
    w2 = W.values[W.layer_slices()[2][1]]
    assert np.std(w2) == pytest.approx(1 / np.sqrt(300), rel=0.05)


def test_per_tensor_parameters():
    m = ModelSpec((200, 100, 40))
    z = InitSpec(std=(0.1, 0.2, 0.3, 0.4), mean=(1.0, 0.0, 0.0, 0.0), seed=1)
    W = init_weights(m, z)
    sl = dict(W.layer_slices())
    assert np.mean(W.values[sl["W1"]]) == pytest.approx(1.0, abs=0.01)
    assert np.std(W.values[sl["W2"]]) == pytest.approx(0.3, rel=0.05)
    with pytest.raises(ModelSpecError):
        InitSpec(std=(0.1, 0.2)).distributions(m.shapes)


def test_uniform_family():
    m = ModelSpec((100, 50, 2))
    W = init_weights(m, InitSpec(family="uniform", low=-0.5, high=0.25, seed=2))
    assert W.values.min() >= -0.5 and W.values.max() <= 0.25
    with pytest.raises(ModelSpecError):
        InitSpec(family="uniform", low=1.0, high=0.0).distributions(m.shapes)
    with pytest.raises(ModelSpecError):
        InitSpec(family="laplace")


def test_init_spec_dict_roundtrip():
    z = InitSpec(family="gaussian", seed=9, std=(0.1, 0.2))
    assert InitSpec.from_dict(z.to_dict()) == z
    assert z.with_seed(3).seed == 3 and z.with_seed(3).std == z.std


def test_predict_and_evaluate():
    D = make_blobs(100, dim=2, seed=0)
    m = ModelSpec((2, 4, 2))
    W = init_weights(m, InitSpec(seed=0))
    p = predict(m, W, D.features)
    acc, loss = evaluate(m, W, D)
    assert p.shape == (100,)
    assert acc == pytest.approx(np.mean(p == D.labels))
    assert loss > 0
