"""Layer descriptors with their forward and backward passes.

Tensors are float64 numpy arrays. Images are NCHW; dense layers take (N, F).
Every arithmetic step goes through an :class:`~trainvar.mca.Arithmetic`
backend, selections (relu, max-pooling, nearest upsampling) are exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trainvar.mca import Arithmetic


class ConfigError(ValueError):
    """Invalid network or training configuration."""


@dataclass(frozen=True)
class Layer:
    kind: ClassVar[str] = "layer"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, ar: Arithmetic, x, params, train: bool, rng):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, ar: Arithmetic, g, params, cache):
        """Return ``(grad_input, grad_params)``."""
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {"type": self.kind, **asdict(self)}


@dataclass(frozen=True)
class Conv2d(Layer):
    """Stride-1 'same' convolution with an odd square kernel."""

    in_ch: int
    out_ch: int
    kernel: int = 3
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"conv2d kernel must be odd and positive, got {self.kernel}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError("conv2d channel counts must be positive")

    def param_shapes(self):
        return {"W": (self.out_ch, self.in_ch, self.kernel, self.kernel), "b": (self.out_ch,)}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigError(f"conv2d expects ({self.in_ch}, H, W) input, got {in_shape}")
        return (self.out_ch, in_shape[1], in_shape[2])

    def _cols(self, x):
        n, c, h, w = x.shape
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        # (N, C, H, W, k, k) -> (N*H*W, C*k*k)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.kernel ** 2)

    def forward(self, ar, x, params, train, rng):
        n, _, h, w = x.shape
        cols = self._cols(x)
        wm = params["W"].reshape(self.out_ch, -1).T
        y = ar.add(ar.matmul(cols, wm), params["b"])
        return y.reshape(n, h, w, self.out_ch).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, ar, g, params, cache):
        cols, (n, c, h, w) = cache
        k, p = self.kernel, self.kernel // 2
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_ch)
        wm = params["W"].reshape(self.out_ch, -1).T
        dW = ar.matmul(cols.T, gm).T.reshape(params["W"].shape)
        db = ar.sum(gm, axis=0)
        dcols = ar.matmul(gm, wm.T).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + h), slice(j, j + w))
                dxp[sl] = ar.add(dxp[sl], dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        return dxp[:, :, p:p + h, p:p + w], {"W": dW, "b": db}


@dataclass(frozen=True)
class Dense(Layer):
    n_in: int
    n_out: int
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError("dense dimensions must be positive")

    def param_shapes(self):
        return {"W": (self.n_in, self.n_out), "b": (self.n_out,)}

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ConfigError(f"dense expects ({self.n_in},) input, got {in_shape}")
        return (self.n_out,)

    def forward(self, ar, x, params, train, rng):
        return ar.add(ar.matmul(x, params["W"]), params["b"]), x

    def backward(self, ar, g, params, x):
        dW = ar.matmul(x.T, g)
        db = ar.sum(g, axis=0)
        return ar.matmul(g, params["W"].T), {"W": dW, "b": db}


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def forward(self, ar, x, params, train, rng):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, ar, g, params, mask):
        return np.where(mask, g, 0.0), {}


@dataclass(frozen=True)
class MaxPool2d(Layer):
    """Non-overlapping k x k max pooling; ties route to the first maximum."""

    k: int = 2
    kind: ClassVar[str] = "maxpool2d"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % self.k or in_shape[2] % self.k:
            raise ConfigError(f"maxpool2d({self.k}) needs (C, H, W) divisible by {self.k}, got {in_shape}")
        return (in_shape[0], in_shape[1] // self.k, in_shape[2] // self.k)

    def forward(self, ar, x, params, train, rng):
        n, c, h, w = x.shape
        k = self.k
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // k, w // k, k * k)
        idx = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], (idx, x.shape)

    def backward(self, ar, g, params, cache):
        idx, (n, c, h, w) = cache
        k = self.k
        blocks = np.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        dx = blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, w), {}


@dataclass(frozen=True)
class Upsample2d(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    k: int = 2
    kind: ClassVar[str] = "upsample2d"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"upsample2d needs (C, H, W) input, got {in_shape}")
        return (in_shape[0], in_shape[1] * self.k, in_shape[2] * self.k)

    def forward(self, ar, x, params, train, rng):
        return x.repeat(self.k, axis=2).repeat(self.k, axis=3), x.shape

    def backward(self, ar, g, params, shape):
        n, c, h, w = shape
        blocks = g.reshape(n, c, h, self.k, w, self.k)
        return ar.sum(blocks, axis=(3, 5)), {}


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""

    p: float = 0.1
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout p must lie in [0, 1), got {self.p}")

    def forward(self, ar, x, params, train, rng):
        if not train or self.p == 0.0:
            return x, None
        if rng is None:
            raise ConfigError("dropout in train mode needs a random stream")
        scale = np.where(rng.random(x.shape) >= self.p, 1.0 / (1.0 - self.p), 0.0)
        return ar.mul(x, scale), scale

    def backward(self, ar, g, params, scale):
        if scale is None:
            return g, {}
        return ar.mul(g, scale), {}


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, ar, x, params, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, ar, g, params, shape):
        return g.reshape(shape), {}


@dataclass(frozen=True)
class Softmax(Layer):
    """Softmax over the channel axis (axis 1)."""

    kind: ClassVar[str] = "softmax"

    def forward(self, ar, x, params, train, rng):
        z = ar.sub(x, x.max(axis=1, keepdims=True))
        e = ar.exp(z)
        p = ar.div(e, ar.sum(e, axis=1, keepdims=True))
        return p, p

    def backward(self, ar, g, params, p):
        dot = ar.sum(ar.mul(p, g), axis=1, keepdims=True)
        return ar.mul(p, ar.sub(g, dot)), {}


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Conv2d, Dense, ReLU, MaxPool2d, Upsample2d, Dropout, Flatten, Softmax)
}


def layer_from_dict(d: dict[str, Any]) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ConfigError(f"unknown layer type {kind!r}")
    try:
        return LAYER_TYPES[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} layer arguments: {exc}") from None
