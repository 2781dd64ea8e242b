"""Monte Carlo Arithmetic with output-only random rounding.

Each floating-point result ``r`` is replaced by ``round(inexact(r))`` where

    inexact(r) = r + 2**(e_r - t) * xi,    xi ~ U(-1/2, 1/2)

``e_r`` is the exponent of ``r`` written as ``m * 2**e_r`` with ``1 <= |m| < 2``
and ``t`` is the virtual precision. Carriers are binary64, so "single
precision" is simulated with ``t = 24``. Zero, NaN and infinities are passed
through unchanged.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from trainvar.rng import stream

#: significand bits of binary64, hidden bit included
NATIVE_PRECISION = 53
MAX_PRECISION = NATIVE_PRECISION + 1


class Mode(str, enum.Enum):
    IEEE = "ieee"
    RANDOM_ROUNDING = "random_rounding"


class McaConfigError(ValueError):
    pass


@dataclass
class McaConfig:
    """Arithmetic mode, virtual precision and noise stream.

    The generator is created lazily from ``(seed, stream)`` and advanced by
    every perturbed operation, so a config object must not be shared between
    concurrent computations; use :meth:`spawn` for independent children.
    ``forced_xi`` pins the noise to a constant, which is only useful for
    diagnostics (``forced_xi=0`` degenerates to IEEE behaviour).
    """

    mode: Mode = Mode.IEEE
    precision: int = NATIVE_PRECISION
    seed: int = 0
    stream: str = "mca"
    forced_xi: float | None = None
    nonfinite_count: int = field(default=0, init=False, compare=False)
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if not isinstance(self.precision, (int, np.integer)) or isinstance(self.precision, bool):
            raise McaConfigError(f"virtual precision must be an integer, got {self.precision!r}")
        if not 1 <= self.precision <= MAX_PRECISION:
            raise McaConfigError(
                f"virtual precision t={self.precision} outside [1, {MAX_PRECISION}]")
        if self.forced_xi is not None and not -0.5 <= self.forced_xi <= 0.5:
            raise McaConfigError(f"forced_xi={self.forced_xi} outside [-1/2, 1/2]")

    @property
    def is_ieee(self) -> bool:
        return self.mode is Mode.IEEE

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = stream(self.seed, self.stream)
        return self._rng

    def reset(self) -> None:
        """Rewind the noise stream and clear counters."""
        self._rng = None
        self.nonfinite_count = 0

    def spawn(self, name: str) -> McaConfig:
        """Independent config on the child stream ``<stream>.<name>``."""
        return McaConfig(self.mode, self.precision, self.seed, f"{self.stream}.{name}", self.forced_xi)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "precision_t": int(self.precision),
            "seed": int(self.seed),
            "stream": self.stream,
            "forced_xi": self.forced_xi,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> McaConfig:
        return cls(
            mode=Mode(d.get("mode", "ieee")),
            precision=int(d.get("precision_t", NATIVE_PRECISION)),
            seed=int(d.get("seed", 0)),
            stream=d.get("stream", "mca"),
            forced_xi=d.get("forced_xi"),
        )


IEEE = McaConfig()


def draw_xi(rng: np.random.Generator, shape=None):
    """Uniform noise on the open interval (-1/2, 1/2)."""
    if shape is None:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        return u - 0.5
    u = rng.random(shape)
    bad = u == 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return u - 0.5


def exponent(x):
    """Exponent ``e`` with ``x = m * 2**e`` and ``1 <= |m| < 2``.

    Subnormals get the exponent of their leading bit; zero maps to 0.
    """
    return np.frexp(x)[1] - 1


def _noise(cfg: McaConfig, shape):
    if cfg.forced_xi is not None:
        return cfg.forced_xi if shape is None else np.full(shape, cfg.forced_xi)
    return draw_xi(cfg.rng, shape)


def inexact(x, cfg: McaConfig, xi=None):
    """Perturb ``x`` at virtual precision ``cfg.precision`` without rounding.

    The unrounded value ``x + 2**(e_x - t) * xi`` generally needs more than 53
    bits, so in random-rounding mode the result is carried in extended
    precision (``np.longdouble``). IEEE mode, zeros and non-finite values
    return ``x`` itself.
    """
    if cfg.is_ieee:
        return x
    scalar = np.ndim(x) == 0
    r = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(r)
    cfg.nonfinite_count += int(r.size - np.count_nonzero(finite))
    if scalar and (not finite or r == 0.0):
        return x
    if xi is None:
        xi = _noise(cfg, None if scalar else r.shape)
    e = exponent(np.where(finite, r, 0.0))
    delta = np.ldexp(np.asarray(xi, dtype=np.longdouble), e - cfg.precision)
    out = np.where(finite & (r != 0.0), r.astype(np.longdouble) + delta, r.astype(np.longdouble))
    return out[()] if scalar else out


def random_round(r, cfg: McaConfig):
    """``round(inexact(r))`` on binary64 carriers.

    The addition ``r + 2**(e_r - t) * xi`` is a single correctly rounded IEEE
    operation, which is exactly rounding the extended-precision inexact value.
    """
    if cfg.is_ieee:
        return r
    a = np.asarray(r, dtype=np.float64)
    if a.ndim == 0:
        v = float(a)
        if v == 0.0:
            return r
        if not np.isfinite(v):
            cfg.nonfinite_count += 1
            return r
        xi = _noise(cfg, None)
        return v + float(np.ldexp(xi, int(exponent(v)) - cfg.precision))
    m, e = np.frexp(a)
    nonzero = m != 0.0
    finite = np.isfinite(a)
    n_bad = a.size - int(np.count_nonzero(finite))
    if n_bad:
        cfg.nonfinite_count += n_bad
        nonzero &= finite
    delta = np.ldexp(_noise(cfg, a.shape), e - 1 - cfg.precision)
    return np.where(nonzero, a + delta, a)


_BINOPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}

_UNOPS = {
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
}

_EXACT_UNOPS = {
    "neg": np.negative,
    "abs": np.abs,
}


def mca_binop(op: str, x: float, y: float, cfg: McaConfig) -> float:
    """Native ``x op y`` followed by random rounding of the result."""
    try:
        fn = _BINOPS[op]
    except KeyError:
        raise ValueError(f"unknown binary op {op!r}") from None
    with np.errstate(all="ignore"):
        r = float(fn(np.float64(x), np.float64(y)))
    return float(random_round(r, cfg))


def mca_unop(op: str, x: float, cfg: McaConfig) -> float:
    """Elementary function with output perturbation; ``neg``/``abs`` are exact."""
    if op in _EXACT_UNOPS:
        return float(_EXACT_UNOPS[op](np.float64(x)))
    try:
        fn = _UNOPS[op]
    except KeyError:
        raise ValueError(f"unknown unary op {op!r}") from None
    with np.errstate(all="ignore"):
        r = float(fn(np.float64(x)))
    return float(random_round(r, cfg))


class Arithmetic:
    """Vectorised arithmetic backend used by the training engine.

    Every method computes the native numpy result and, in random-rounding
    mode, perturbs each element of that result once. Reductions (``sum``,
    ``matmul``) perturb their outputs, not their internal partial sums.
    Selections (max, relu masks, indexing) and sign changes are exact and are
    done directly with numpy by callers.
    """

    def __init__(self, cfg: McaConfig | None = None):
        self.cfg = cfg if cfg is not None else McaConfig()

    @property
    def exact(self) -> bool:
        return self.cfg.is_ieee

    def round(self, a):
        # numpy's pairwise sums depend on memory layout, so both modes hand
        # back C-ordered arrays; otherwise zero noise would not equal IEEE
        if np.ndim(a) > 0:
            a = np.ascontiguousarray(a)
        if self.cfg.is_ieee:
            return a
        return random_round(a, self.cfg)

    def add(self, a, b):
        return self.round(np.add(a, b))

    def sub(self, a, b):
        return self.round(np.subtract(a, b))

    def mul(self, a, b):
        return self.round(np.multiply(a, b))

    def div(self, a, b):
        return self.round(np.divide(a, b))

    def matmul(self, a, b):
        return self.round(a @ b)

    def sum(self, a, axis=None, keepdims=False):
        return self.round(np.sum(a, axis=axis, keepdims=keepdims))

    def mean(self, a, axis=None, keepdims=False):
        n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return self.div(self.sum(a, axis=axis, keepdims=keepdims), float(n))

    def exp(self, a):
        return self.round(np.exp(a))

    def log(self, a):
        return self.round(np.log(a))

    def sqrt(self, a):
        return self.round(np.sqrt(a))

    def tanh(self, a):
        return self.round(np.tanh(a))
