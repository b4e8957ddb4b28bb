"""
Corrected resampled t-test for repeated cross-validation.

The Student-t tail is computed through the regularized incomplete beta
function, evaluated with a modified Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.003
_TINY = 1e-300


@dataclass
class TTestResult:
    mean_diff: float
    var_diff: float
    n: int
    ratio: float
    t: float
    p: float
    alpha: float
    significant: bool
    degenerate: bool = False


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    # continued fraction for I_x(a, b), modified Lentz
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    if t == 0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t > 0 else tail


def corrected_resampled_ttest(diffs, ratio: float = 1.0, alpha: float = DEFAULT_ALPHA) -> TTestResult:
    """Paired t-test with the (1/n + n_test/n_train) variance correction."""
    d = np.asarray(diffs, dtype=np.float64).ravel()
    n = d.size
    if n < 2:
        raise ValueError("need at least two differences")
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(mean, var, n, ratio, 0.0, 1.0, alpha, False, degenerate=True)
        t = math.copysign(math.inf, mean)
        return TTestResult(mean, var, n, ratio, t, 0.0, alpha, True, degenerate=True)
    t = mean / math.sqrt((1.0 / n + ratio) * var)
    p = min(1.0, max(0.0, t_two_sided_p(t, n - 1)))
    return TTestResult(mean, var, n, ratio, t, p, alpha, p < alpha)
