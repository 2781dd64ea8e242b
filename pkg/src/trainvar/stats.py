"""Welch t-tests, Bonferroni correction, Pearson correlation, OLS lines.

The Student-t tail is evaluated through the regularised incomplete beta
function, ``P(T > t) = I_x(dof/2, 1/2) / 2`` with ``x = dof / (dof + t^2)``,
using the modified Lentz continued fraction. No statistics library is used.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np

ALTERNATIVES = ("two_sided", "less", "greater")
P_FLOOR = sys.float_info.min  # smallest positive normal binary64


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    dof: float
    alternative: str
    flags: frozenset[str] = field(default_factory=frozenset)

    @property
    def saturated(self) -> bool:
        return "saturated" in self.flags

    @property
    def degenerate(self) -> bool:
        return "degenerate" in self.flags


def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise StatsError("dof must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    if x >= 1.0:
        # t*t is negligible next to dof
        return 0.5
    tail = 0.5 * betainc(0.5 * dof, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def student_t_cdf(t: float, dof: float) -> float:
    return student_t_sf(-t, dof)


def _p_from_t(t: float, dof: float, alternative: str) -> float:
    if alternative == "two_sided":
        return min(1.0, 2.0 * student_t_sf(abs(t), dof))
    if alternative == "less":
        return student_t_cdf(t, dof)
    if alternative == "greater":
        return student_t_sf(t, dof)
    raise StatsError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")


def _saturate(p: float, flags: set[str]) -> float:
    if p < P_FLOOR:
        flags.add("saturated")
        return P_FLOOR
    return p


def welch_t_test(sample_a, sample_b, alternative: str = "two_sided") -> TestResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite dof.

    ``less`` tests mean(a) < mean(b); ``greater`` tests mean(a) > mean(b).
    """
    if alternative not in ALTERNATIVES:
        raise StatsError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise StatsError("each sample needs at least 2 values")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 == 0.0:
        dof = float(na + nb - 2)
        if ma == mb:
            return TestResult(0.0, 1.0, dof, alternative, frozenset({"degenerate"}))
        t = math.copysign(math.inf, ma - mb)
        return TestResult(t, _p_from_t(t, dof, alternative), dof, alternative,
                          frozenset({"degenerate", "zero_variance"}))
    t = (ma - mb) / math.sqrt(se2)
    dof = se2 * se2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    flags: set[str] = set()
    p = _p_from_t(t, dof, alternative)
    if p == 0.0 or p < P_FLOOR:
        p = _saturate(p, flags)
    return TestResult(t, p, dof, alternative, frozenset(flags))


@dataclass(frozen=True)
class BonferroniResult:
    threshold: float
    significant: list[bool]
    adjusted: list[float]


def bonferroni(p_values, alpha: float = 0.05) -> BonferroniResult:
    """Significant iff ``p < alpha / m``; adjusted ``p' = min(1, m p)``."""
    p = [float(v) for v in p_values]
    m = len(p)
    if m < 1:
        raise StatsError("need at least one p-value")
    if not 0.0 < alpha < 1.0:
        raise StatsError("alpha must lie in (0, 1)")
    thr = alpha / m
    return BonferroniResult(thr, [v < thr for v in p], [min(1.0, m * v) for v in p])


@dataclass(frozen=True)
class Correlation:
    r: float
    p_value: float
    n: int


def pearson(x, y) -> Correlation:
    """Sample correlation with a two-sided p from ``t = r sqrt((n-2)/(1-r^2))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("x and y must be 1-d and the same length")
    n = x.size
    if n < 3:
        raise StatsError("pearson needs n >= 3")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatsError("correlation is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return Correlation(r, 0.0, n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Correlation(r, _p_from_t(t, n - 2, "two_sided"), n)


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


def linear_fit(x, y) -> LineFit:
    """Ordinary least squares ``y ~ slope * x + intercept``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("x and y must be 1-d and the same length")
    if x.size < 2:
        raise StatsError("linear_fit needs n >= 2")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise StatsError("singular fit: x is constant")
    slope = float(dx @ (y - y.mean())) / sxx
    return LineFit(slope, float(y.mean() - slope * x.mean()))
