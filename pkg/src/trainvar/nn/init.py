"""Weight initialisation schemes.

Conv weights are stored (out, in, k, k) and dense weights (in, out). Schemes
that need a matrix view use ``(fan_in, out)`` columns, one per output unit,
so "per column" in the sparse scheme means "per output unit".
"""

from __future__ import annotations

import math

import numpy as np

from trainvar.nn.layers import ConfigError, Conv2d, Dense, Layer
from trainvar.rng import stream

SCHEMES = (
    "dirac",
    "identity",
    "kaiming_normal",
    "kaiming_uniform",
    "orthogonal",
    "sparse",
    "xavier_uniform",
    "xavier_normal",
)

RELU_GAIN = math.sqrt(2.0)
SPARSITY = 0.9
SPARSE_STD = 0.01
FALLBACK_SCHEME = "kaiming_uniform"


def fans(layer: Layer) -> tuple[int, int]:
    if isinstance(layer, Conv2d):
        rf = layer.kernel * layer.kernel
        return layer.in_ch * rf, layer.out_ch * rf
    if isinstance(layer, Dense):
        return layer.n_in, layer.n_out
    raise ConfigError(f"layer {layer.kind} has no weights")


def _as_matrix(layer: Layer, shape) -> tuple[int, int]:
    if isinstance(layer, Conv2d):
        return int(np.prod(shape[1:])), shape[0]
    return shape


def _from_matrix(layer: Layer, m: np.ndarray, shape) -> np.ndarray:
    if isinstance(layer, Conv2d):
        return np.ascontiguousarray(m.T).reshape(shape)
    return m


def applicable(scheme: str, layer: Layer) -> bool:
    if scheme == "dirac":
        return isinstance(layer, Conv2d)
    if scheme == "identity":
        return isinstance(layer, Dense) and layer.n_in == layer.n_out
    return True


def _weight(scheme: str, layer: Layer, rng: np.random.Generator) -> np.ndarray:
    shape = layer.param_shapes()["W"]
    fan_in, fan_out = fans(layer)
    if scheme == "dirac":
        w = np.zeros(shape)
        c = layer.kernel // 2
        for i in range(min(layer.in_ch, layer.out_ch)):
            w[i, i, c, c] = 1.0
        return w
    if scheme == "identity":
        return np.eye(layer.n_in)
    if scheme == "kaiming_normal":
        return rng.normal(0.0, RELU_GAIN / math.sqrt(fan_in), shape)
    if scheme == "kaiming_uniform":
        bound = RELU_GAIN * math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, shape)
    if scheme == "xavier_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, shape)
    if scheme == "xavier_normal":
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)
    rows, cols = _as_matrix(layer, shape)
    if scheme == "orthogonal":
        a = rng.normal(size=(max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        m = q if rows >= cols else q.T
        return _from_matrix(layer, m, shape)
    if scheme == "sparse":
        m = rng.normal(0.0, SPARSE_STD, (rows, cols))
        n_zero = math.ceil(SPARSITY * rows)
        for j in range(cols):
            m[rng.permutation(rows)[:n_zero], j] = 0.0
        return _from_matrix(layer, m, shape)
    raise ConfigError(f"unknown init scheme {scheme!r}")


def init_weights(layers, scheme: str, seed: int, *, strict: bool = True,
                 fallback: str = FALLBACK_SCHEME) -> list[dict[str, np.ndarray]]:
    """Initialise the parameters of ``layers``; biases are always zero.

    With ``strict=False`` layers the scheme cannot handle (``dirac`` on dense
    layers, ``identity`` on non-square or conv layers) use ``fallback``.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {', '.join(SCHEMES)}")
    rng = stream(seed, "init")
    params = []
    for i, layer in enumerate(layers):
        shapes = layer.param_shapes()
        if not shapes:
            params.append({})
            continue
        use = scheme
        if not applicable(scheme, layer):
            if strict:
                raise ConfigError(f"init scheme {scheme!r} cannot be applied to layer {i} ({layer.kind} {shapes['W']})")
            use = fallback
        params.append({"W": _weight(use, layer, rng).astype(np.float64), "b": np.zeros(shapes["b"])})
    return params
