"""Deterministic numerical core.

Weights live in a flat float64 vector; the model family (dense layers with a
smooth activation) is differentiated analytically. Second-order quantities
needed by the attacks are obtained forward-over-reverse: the input gradient of
the loss is pushed along a tangent direction in weight space, which yields
``J^T v`` with ``J = d(grad_W L)/dX`` without forming any Hessian.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from polspoof import ledger as _ledger
from polspoof.errors import DimensionError, NonFiniteError

if TYPE_CHECKING:
    from polspoof.ledger import CostLedger
    from polspoof.models import ModelSpec

DEFAULT_LAMBDA = 0.01


# -- weights -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Flattened parameters plus the layout needed to unflatten them."""

    values: np.ndarray
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        shapes = tuple((str(name), tuple(int(d) for d in dims)) for name, dims in self.shapes)
        expected = sum(int(np.prod(dims)) for _, dims in shapes)
        if expected != values.size:
            raise DimensionError(
                f"layout describes {expected} parameters but {values.size} were given"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("weight vector contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[str, np.ndarray]]) -> WeightVector:
        shapes = tuple((name, tuple(np.shape(a))) for name, a in layers)
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in layers]) \
            if layers else np.zeros(0)
        return cls(flat, shapes)

    def unflatten(self) -> list[np.ndarray]:
        out, offset = [], 0
        for _, dims in self.shapes:
            size = int(np.prod(dims))
            out.append(self.values[offset:offset + size].reshape(dims))
            offset += size
        return out

    def layer_slices(self) -> list[tuple[str, slice]]:
        out, offset = [], 0
        for name, dims in self.shapes:
            size = int(np.prod(dims))
            out.append((name, slice(offset, offset + size)))
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> WeightVector:
        return WeightVector(values, self.shapes)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"WeightVector(n={self.values.size}, layers={[n for n, _ in self.shapes]})"


def _as_values(w) -> np.ndarray:
    return w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)


# -- activations -------------------------------------------------------------


def _tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))  # numerically stable sigmoid
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


# name -> z -> (value, first derivative, second derivative)
ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus}


# -- forward / backward ------------------------------------------------------


@dataclass
class _Trace:
    inputs: list  # a_0 .. a_{L-1}
    pre: list  # z_1 .. z_L
    d1: list  # activation first derivatives for hidden layers
    d2: list
    logits: np.ndarray


def _params(model: ModelSpec, W) -> list[tuple[np.ndarray, np.ndarray | None]]:
    layers = W.unflatten() if isinstance(W, WeightVector) else model.unflatten(W)
    out = []
    i = 0
    for _ in range(model.n_layers):
        Wl = layers[i]
        i += 1
        bl = None
        if model.bias:
            bl = layers[i]
            i += 1
        out.append((Wl, bl))
    return out


def _check_batch(model: ModelSpec, X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError("batch must be a non-empty 2-D array")
    if y.shape[0] != X.shape[0]:
        raise DimensionError(f"batch has {X.shape[0]} rows but {y.shape[0]} labels")
    if X.shape[1] != model.widths[0]:
        raise DimensionError(
            f"layer 'W1' expects {model.widths[0]} input features, batch has {X.shape[1]}"
        )


def _forward(model: ModelSpec, params, X: np.ndarray) -> _Trace:
    act = ACTIVATIONS[model.activation]
    a = X
    trace = _Trace([], [], [], [], None)
    for idx, (Wl, bl) in enumerate(params):
        trace.inputs.append(a)
        z = a @ Wl
        if bl is not None:
            z = z + bl
        trace.pre.append(z)
        if idx < len(params) - 1:
            a, s1, s2 = act(z)
            trace.d1.append(s1)
            trace.d2.append(s2)
        else:
            trace.logits = z
    return trace


def logits(model: ModelSpec, W, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return _forward(model, _params(model, W), X).logits


def batch_loss(model: ModelSpec, W, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_batch(model, X, y)
    z = _forward(model, _params(model, W), X).logits
    return _loss_and_delta(model, z, y)[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _targets(model: ModelSpec, y: np.ndarray) -> np.ndarray:
    if model.classes == 1:
        return y.astype(np.float64).reshape(-1, 1)
    T = np.zeros((y.shape[0], model.classes))
    T[np.arange(y.shape[0]), y.astype(np.int64)] = 1.0
    return T


def _loss_and_delta(model: ModelSpec, z: np.ndarray, y: np.ndarray):
    B = z.shape[0]
    if model.loss == "cross_entropy":
        zmax = z.max(axis=1, keepdims=True)
        lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
        yi = y.astype(np.int64)
        loss = float(np.mean(lse - z[np.arange(B), yi]))
        p = _softmax(z)
        delta = p.copy()
        delta[np.arange(B), yi] -= 1.0
        return loss, delta / B, p
    T = _targets(model, y)
    r = z - T
    return float(0.5 * np.mean(np.sum(r * r, axis=1))), r / B, None


def _backward(params, trace: _Trace, delta: np.ndarray, want_input: bool = False):
    grads = []
    L = len(params)
    for l in range(L - 1, -1, -1):
        Wl, bl = params[l]
        a = trace.inputs[l]
        gb = delta.sum(axis=0) if bl is not None else None
        grads.append((a.T @ delta, gb))
        if l > 0 or want_input:
            e = delta @ Wl.T
            delta = e * trace.d1[l - 1] if l > 0 else e
    grads.reverse()
    flat = []
    for gW, gb in grads:
        flat.append(gW.reshape(-1))
        if gb is not None:
            flat.append(gb)
    gx = delta if want_input else None
    return np.concatenate(flat), gx


def weight_grad(model: ModelSpec, W, X, y) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its exact gradient w.r.t. the flat weights.

    Not ledgered; use :func:`loss_grad` wherever cost matters.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_batch(model, X, y)
    params = _params(model, W)
    trace = _forward(model, params, X)
    loss, delta, _ = _loss_and_delta(model, trace.logits, y)
    g, _ = _backward(params, trace, delta)
    return loss, g


def loss_grad(model: ModelSpec, W, X, y, *, ledger: CostLedger | None = None):
    """Loss and weight gradient; charges one gradient computation."""
    out = weight_grad(model, W, X, y)
    led = _ledger.resolve(ledger)
    if led is not None:
        led.add_updates(1)
    return out


def input_grad(model: ModelSpec, W, X, y) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the batch features (first order, unledgered)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_batch(model, X, y)
    params = _params(model, W)
    trace = _forward(model, params, X)
    _, delta, _ = _loss_and_delta(model, trace.logits, y)
    _, gx = _backward(params, trace, delta, want_input=True)
    return gx


def mixed_vjp(model: ModelSpec, W, X, y, v: np.ndarray) -> np.ndarray:
    """``d/dX <v, grad_W L(W, X)>`` for a fixed weight-space vector ``v``.

    Pushes the input-gradient computation along the tangent ``W + eps * v``;
    the tangent of ``grad_X L`` at ``eps = 0`` is the requested product.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    params = _params(model, W)
    tangents = _params(model, np.asarray(v, dtype=np.float64))
    trace = _forward(model, params, X)
    B = X.shape[0]

    # forward tangents of pre-activations
    zdots = []
    adot = np.zeros_like(X)
    for l, ((Wl, _), (Vl, vbl)) in enumerate(zip(params, tangents)):
        zd = adot @ Wl + trace.inputs[l] @ Vl
        if vbl is not None:
            zd = zd + vbl
        zdots.append(zd)
        if l < len(params) - 1:
            adot = trace.d1[l] * zd

    _, delta, p = _loss_and_delta(model, trace.logits, y)
    zL = zdots[-1]
    if model.loss == "cross_entropy":
        ddot = p * (zL - np.sum(p * zL, axis=1, keepdims=True)) / B
    else:
        ddot = zL / B

    for l in range(len(params) - 1, -1, -1):
        Wl, _ = params[l]
        Vl, _ = tangents[l]
        e = delta @ Wl.T
        edot = ddot @ Wl.T + delta @ Vl.T
        if l == 0:
            return edot
        s1, s2 = trace.d1[l - 1], trace.d2[l - 1]
        delta = e * s1
        ddot = edot * s1 + e * s2 * zdots[l - 1]
    raise AssertionError("unreachable")


# -- adversarial objectives --------------------------------------------------


class ObjectiveKind(enum.Enum):
    GRAD_NORM = "grad_norm"
    TARGET_DISTANCE = "target_distance"


def _unit(v: np.ndarray) -> tuple[float, np.ndarray]:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return 0.0, np.zeros_like(v)
    return n, v / n


def input_objective_grad(
    model: ModelSpec,
    W,
    X,
    R,
    y,
    objective: ObjectiveKind = ObjectiveKind.GRAD_NORM,
    lam: float = DEFAULT_LAMBDA,
    *,
    target=None,
    eta: float | None = None,
    ledger: CostLedger | None = None,
) -> tuple[float, np.ndarray]:
    """Value and exact R-gradient of an adversarial objective on ``X + R``.

    GRAD_NORM:        ||grad_W L(X+R)|| + lam ||R||
    TARGET_DISTANCE:  ||(W - eta grad_W L(X+R)) - target|| + lam ||R||

    Norms are l2; at a zero argument the zero subgradient is used. Charges
    one adversarial-optimization iteration (three gradient computations).
    """
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if R.shape != X.shape:
        raise DimensionError(f"noise batch shape {R.shape} does not match features {X.shape}")
    Xp = X + R
    _, g = weight_grad(model, W, Xp, y)
    wv = _as_values(W)
    if objective is ObjectiveKind.GRAD_NORM:
        head, direction = _unit(g)
        scale = 1.0
    elif objective is ObjectiveKind.TARGET_DISTANCE:
        if target is None or eta is None:
            raise ValueError("TARGET_DISTANCE needs both target and eta")
        u = wv - eta * g - _as_values(target)
        head, direction = _unit(u)
        scale = -eta
    else:
        raise ValueError(f"unknown objective {objective!r}")

    rnorm, rdir = _unit(R)
    value = head + lam * rnorm
    dR = lam * rdir
    if head > 0.0:
        dR = dR + scale * mixed_vjp(model, W, Xp, y, direction)

    led = _ledger.resolve(ledger)
    if led is not None:
        led.add_opt_iterations(1)
    return value, dR


# -- update and noise --------------------------------------------------------


def sgd_update(W: WeightVector, g, eta: float) -> WeightVector:
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != W.values.shape:
        raise DimensionError(f"gradient has {g.size} entries, weights have {W.values.size}")
    return W.with_values(W.values - eta * g)


@dataclass(frozen=True)
class NoiseModel:
    """Seeded emulation of hardware nondeterminism added to every gradient."""

    amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")

    def to_dict(self) -> dict:
        return {"amplitude": self.amplitude, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseModel:
        return cls(float(d["amplitude"]), int(d["seed"]))


def inject_noise(g, nm: NoiseModel, step: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if nm.amplitude == 0.0:
        return g
    rng = np.random.default_rng([nm.seed & 0xFFFFFFFFFFFFFFFF, int(step)])
    return g + nm.amplitude * rng.standard_normal(g.shape)
