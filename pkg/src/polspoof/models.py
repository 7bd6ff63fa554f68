"""The twice-differentiable model family and its initialization distributions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import stats

from polspoof.diffcore import ACTIVATIONS, WeightVector, batch_loss, logits
from polspoof.errors import ModelSpecError

LOSSES = ("cross_entropy", "squared_error")


@dataclass(frozen=True)
class ModelSpec:
    """Dense network ``widths[0] -> ... -> widths[-1]`` with a C^2 activation.

    ``widths[-1]`` is the number of output classes. With no hidden layers this
    is a linear / logistic-regression model and the activation is unused.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    loss: str = "cross_entropy"
    bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ModelSpecError(f"need at least input and output widths, all positive: {widths}")
        if self.activation not in ACTIVATIONS:
            raise ModelSpecError(
                f"activation {self.activation!r} is not twice differentiable everywhere; "
                f"choose one of {sorted(ACTIVATIONS)}"
            )
        if self.loss not in LOSSES:
            raise ModelSpecError(f"unknown loss {self.loss!r}")
        if self.loss == "cross_entropy" and widths[-1] < 2:
            raise ModelSpecError("cross-entropy needs at least two output classes")

    @property
    def classes(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        out = []
        for l in range(self.n_layers):
            out.append((f"W{l + 1}", (self.widths[l], self.widths[l + 1])))
            if self.bias:
                out.append((f"b{l + 1}", (self.widths[l + 1],)))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(d)) for _, d in self.shapes)

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != self.n_params:
            raise ModelSpecError(f"expected {self.n_params} parameters, got {flat.size}")
        out, offset = [], 0
        for _, dims in self.shapes:
            size = int(np.prod(dims))
            out.append(flat[offset:offset + size].reshape(dims))
            offset += size
        return out

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "loss": self.loss, "bias": self.bias}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(tuple(d["widths"]), d.get("activation", "tanh"),
                   d.get("loss", "cross_entropy"), bool(d.get("bias", True)))


PerLayer = Union[float, Sequence[float], None]


def _fan_ins(shapes) -> list[int]:
    # biases inherit the fan-in of the weight matrix preceding them
    fans, last = [], 1
    for _, dims in shapes:
        if len(dims) >= 2:
            last = int(dims[0])
        fans.append(last)
    return fans


def _per_layer(value: PerLayer, n: int, default: list[float]) -> list[float]:
    if value is None:
        return list(default)
    if np.isscalar(value):
        return [float(value)] * n
    value = [float(v) for v in value]
    if len(value) != n:
        raise ModelSpecError(f"per-layer init parameter needs {n} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class InitSpec:
    """Initialization distribution (zeta), one distribution per parameter tensor.

    gaussian: ``mean`` (default 0) and ``std`` (default 1/sqrt(fan_in)).
    uniform:  ``low``/``high`` (default -+1/sqrt(fan_in)).
    Each may be a scalar or a per-tensor sequence.
    """

    family: str = "gaussian"
    seed: int = 0
    mean: PerLayer = None
    std: PerLayer = None
    low: PerLayer = None
    high: PerLayer = None

    def __post_init__(self):
        if self.family not in ("gaussian", "uniform"):
            raise ModelSpecError(f"unknown init family {self.family!r}")
        for name in ("mean", "std", "low", "high"):
            v = getattr(self, name)
            if v is not None and not np.isscalar(v):
                object.__setattr__(self, name, tuple(float(x) for x in v))

    def with_seed(self, seed: int) -> InitSpec:
        return InitSpec(self.family, int(seed), self.mean, self.std, self.low, self.high)

    def distributions(self, shapes) -> list:
        """Frozen scipy distributions, aligned with ``shapes``."""
        n = len(shapes)
        scale = [1.0 / np.sqrt(f) for f in _fan_ins(shapes)]
        if self.family == "gaussian":
            means = _per_layer(self.mean, n, [0.0] * n)
            stds = _per_layer(self.std, n, scale)
            if any(s <= 0 for s in stds):
                raise ModelSpecError("gaussian std must be positive")
            return [stats.norm(loc=m, scale=s) for m, s in zip(means, stds)]
        lows = _per_layer(self.low, n, [-s for s in scale])
        highs = _per_layer(self.high, n, scale)
        if any(lo >= hi for lo, hi in zip(lows, highs)):
            raise ModelSpecError("uniform init needs low < high")
        return [stats.uniform(loc=lo, scale=hi - lo) for lo, hi in zip(lows, highs)]

    def sample(self, shapes, rng: np.random.Generator) -> list[np.ndarray]:
        out = []
        for dist, (_, dims) in zip(self.distributions(shapes), shapes):
            size = int(np.prod(dims))
            if self.family == "gaussian":
                m, s = dist.mean(), dist.std()
                out.append(rng.normal(m, s, size))
            else:
                lo, hi = dist.support()
                out.append(rng.uniform(lo, hi, size))
        return out

    def to_dict(self) -> dict:
        d = {"family": self.family, "seed": self.seed}
        for name in ("mean", "std", "low", "high"):
            v = getattr(self, name)
            if v is not None:
                d[name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> InitSpec:
        return cls(d.get("family", "gaussian"), int(d.get("seed", 0)),
                   d.get("mean"), d.get("std"), d.get("low"), d.get("high"))


def init_weights(spec: ModelSpec, zeta: InitSpec) -> WeightVector:
    rng = np.random.default_rng(zeta.seed)
    parts = zeta.sample(spec.shapes, rng)
    return WeightVector(np.concatenate(parts), spec.shapes)


def predict(spec: ModelSpec, W: WeightVector, X) -> np.ndarray:
    return np.argmax(logits(spec, W, X), axis=1)


def evaluate(spec: ModelSpec, W: WeightVector, D) -> tuple[float, float]:
    """(accuracy, mean loss) over the whole dataset."""
    if len(D) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    acc = float(np.mean(predict(spec, W, D.features) == D.labels))
    loss = batch_loss(spec, W, D.features, D.labels)
    return acc, loss
