"""Network specification, parameter container and forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from trainvar.mca import Arithmetic
from trainvar.nn.init import SCHEMES, init_weights
from trainvar.nn.layers import (
    ConfigError,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2d,
    ReLU,
    Softmax,
    Upsample2d,
    layer_from_dict,
)
from trainvar.nn.losses import EXACT, LossWeights, loss_grad, loss_terms


class NumericBlowUp(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""

    def __init__(self, layer: int, where: str = "forward", epoch: int | None = None,
                 batch: int | None = None):
        self.layer, self.where, self.epoch, self.batch = layer, where, epoch, batch
        loc = f" (epoch {epoch}, batch {batch})" if epoch is not None else ""
        super().__init__(f"non-finite {where} value at layer {layer}{loc}")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    init_scheme: str = "kaiming_uniform"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.init_scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ConfigError("network must end with a softmax layer")
        self.output_shape()

    def output_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i}: {exc}") from None
        return shape

    @property
    def n_classes(self) -> int:
        return self.output_shape()[0]

    def with_scheme(self, scheme: str) -> NetworkSpec:
        return NetworkSpec(self.input_shape, self.layers, scheme)

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "init_scheme": self.init_scheme,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> NetworkSpec:
        unknown = set(d) - {"input_shape", "layers", "init_scheme"}
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(x) for x in d["layers"]),
                   d.get("init_scheme", "kaiming_uniform"))


def segmentation_net(size: int = 32, n_classes: int = 4, width: int = 16, in_ch: int = 1,
                     dropout: float = 0.1, init_scheme: str = "kaiming_uniform") -> NetworkSpec:
    """Two-level encoder-decoder: (conv-relu-pool) x2, (upsample-conv) x2, softmax."""
    w1, w2 = width, 2 * width
    layers = [
        Conv2d(in_ch, w1, 3), ReLU(), MaxPool2d(2),
        Conv2d(w1, w2, 3), ReLU(), MaxPool2d(2),
        Dropout(dropout),
        Upsample2d(2), Conv2d(w2, w1, 3), ReLU(),
        Upsample2d(2), Conv2d(w1, n_classes, 3),
        Softmax(),
    ]
    return NetworkSpec((in_ch, size, size), tuple(layers), init_scheme)


def mnist_net(width: int = 8, dropout: float = 0.1, n_classes: int = 10,
              init_scheme: str = "kaiming_uniform") -> NetworkSpec:
    """Small CNN classifier for 28x28 single-channel digits."""
    w1, w2 = width, 2 * width
    layers = [
        Conv2d(1, w1, 3), ReLU(), MaxPool2d(2),
        Conv2d(w1, w2, 3), ReLU(), MaxPool2d(2),
        Flatten(), Dropout(dropout),
        Dense(w2 * 7 * 7, n_classes),
        Softmax(),
    ]
    return NetworkSpec((1, 28, 28), tuple(layers), init_scheme)


PRESETS = {"segmentation": segmentation_net, "mnist": mnist_net}


@dataclass
class Model:
    spec: NetworkSpec
    params: list[dict[str, np.ndarray]]
    epoch: int = 0

    def __post_init__(self):
        if len(self.params) != len(self.spec.layers):
            raise ConfigError("parameter list does not match the layer list")
        for i, (layer, p) in enumerate(zip(self.spec.layers, self.params)):
            want = layer.param_shapes()
            got = {k: tuple(v.shape) for k, v in p.items()}
            if got != want:
                raise ConfigError(f"layer {i}: parameter shapes {got} != {want}")

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int, *, strict: bool = True) -> Model:
        return cls(spec, init_weights(spec.layers, spec.init_scheme, seed, strict=strict))

    def copy(self) -> Model:
        return Model(self.spec, [{k: v.copy() for k, v in p.items()} for p in self.params], self.epoch)

    def flat(self) -> np.ndarray:
        """All parameters concatenated in layer order, ``W`` before ``b``."""
        parts = [p[k].ravel() for p in self.params for k in sorted(p)]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class Tape:
    caches: list = field(default_factory=list)
    probs: np.ndarray | None = None


def _check_finite(a, layer, where):
    if not np.isfinite(a).all():
        raise NumericBlowUp(layer, where)


def _forward(model: Model, x: np.ndarray, ar: Arithmetic, train: bool, rng) -> Tape:
    if tuple(x.shape[1:]) != model.spec.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} != network input {model.spec.input_shape}")
    tape = Tape()
    a = np.asarray(x, dtype=np.float64)
    for i, (layer, p) in enumerate(zip(model.spec.layers, model.params)):
        a, cache = layer.forward(ar, a, p, train, rng)
        _check_finite(a, i, "forward")
        tape.caches.append(cache)
    tape.probs = a
    return tape


def forward(model: Model, batch: np.ndarray, train_mode: bool = False, dropout_rng=None,
            ar: Arithmetic = EXACT) -> np.ndarray:
    """Class probabilities for ``batch``; dropout is active only in train mode."""
    return _forward(model, batch, ar, train_mode, dropout_rng).probs


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """IEEE eval-mode probabilities, computed in chunks."""
    out = [forward(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + model.spec.output_shape())


def _backward(model: Model, tape: Tape, g: np.ndarray, ar: Arithmetic) -> list[dict[str, np.ndarray]]:
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.spec.layers]
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer = model.spec.layers[i]
        g, grads[i] = layer.backward(ar, g, model.params[i], tape.caches[i])
        _check_finite(g, i, "backward")
    return grads


def loss_and_grads(model: Model, x, labels, weights: LossWeights, ar: Arithmetic = EXACT,
                   train: bool = False, rng=None, counters=None):
    """One forward/backward pass: ``((ce, dice, total), grads)``."""
    tape = _forward(model, x, ar, train, rng)
    terms = loss_terms(tape.probs, labels, weights, ar, counters)
    g = loss_grad(tape.probs, labels, weights, ar)
    return terms, _backward(model, tape, g, ar)


def backward(model: Model, batch, labels, weights: LossWeights = LossWeights(),
             ar: Arithmetic = EXACT, train: bool = False, rng=None) -> list[dict[str, np.ndarray]]:
    """Gradients of the weighted loss with respect to every parameter."""
    return loss_and_grads(model, batch, labels, weights, ar, train, rng)[1]


__all__ = [
    "Conv2d", "Dense", "Dropout", "Flatten", "MaxPool2d", "ReLU", "Softmax", "Upsample2d",
    "Model", "NetworkSpec", "NumericBlowUp", "backward", "forward", "loss_and_grads",
    "mnist_net", "predict", "segmentation_net",
]
