"""Exponential integral Ei, the one special function the bridge variance needs.

Ei(x) = PV integral of e^t / t from -inf to x (Cauchy principal value for
x > 0).  The closed-form bridge standard deviation evaluates Ei only on
moderate negative arguments, so the convergent power series

    Ei(x) = gamma + ln|x| + sum_{k>=1} x^k / (k * k!)

does most of the work.  The series is used wherever double precision can
sum it without losing the answer to cancellation; outside that range two
standard complements take over:

* large positive x: the divergent asymptotic expansion
  Ei(x) ~ e^x / x * sum_k k! / x^k, truncated at its smallest term;
* negative x of large magnitude: the continued fraction for E1(-x)
  (modified Lentz), since the alternating series loses ~2|x|/ln(10)
  digits to cancellation and is unusable in double precision well
  before |x| = 40.

All branches are pure functions of their scalar argument and safe to call
concurrently.
"""

import math

from .errors import DomainError

# Euler-Mascheroni constant, 20 significant digits.
EULER_GAMMA = 0.57721566490153286061

# Branch switch points.  Positive side follows the plain series up to 40.
# Negative side must leave the series much earlier: the alternating sum's
# largest partial term is ~e^{2|x|} times the result, so beyond |x| = 5
# double precision cannot deliver 1e-12.
_POS_SERIES_MAX = 40.0
_NEG_SERIES_MAX = 5.0

_MAX_SERIES_TERMS = 500
_MAX_CF_ITERS = 400
_EPS = 2.2e-16
_FPMIN = 1e-300


def _ei_series(x: float) -> float:
    """Convergent power series, valid for any finite x != 0.

    Accuracy in double precision degrades as e^{2|x|} * eps for x < 0;
    callers restrict the negative range accordingly.
    """
    total = 0.0
    term = 1.0
    for k in range(1, _MAX_SERIES_TERMS + 1):
        term *= x / k
        summand = term / k
        total += summand
        if abs(summand) < _EPS * abs(total):
            break
    return EULER_GAMMA + math.log(abs(x)) + total


def _e1_continued_fraction(a: float) -> float:
    """E1(a) for a > 0 via the modified Lentz continued fraction."""
    b = a + 1.0
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_CF_ITERS + 1):
        numer = -float(i) * float(i)
        b += 2.0
        d = 1.0 / (numer * d + b)
        c = b + numer / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-a)


def _ei_asymptotic(x: float) -> float:
    """Asymptotic expansion e^x/x * sum k!/x^k, truncated at the smallest term.

    Valid for large |x|; used here for x > 40 where the truncation floor
    sqrt(2*pi*x)*e^{-x} is far below double precision.
    """
    total = 1.0
    term = 1.0
    for k in range(1, _MAX_SERIES_TERMS + 1):
        nxt = term * k / x
        if abs(nxt) >= abs(term):
            break
        term = nxt
        total += term
    return math.exp(x) / x * total


def expint_ei(x: float) -> float:
    """Evaluate the exponential integral Ei(x) for finite nonzero real x.

    Raises DomainError for x == 0 (logarithmic singularity) and for
    non-finite input.
    """
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"Ei requires finite x, got {x!r}")
    if x == 0.0:
        raise DomainError("Ei has a logarithmic singularity at x = 0")
    if x > 0.0:
        if x <= _POS_SERIES_MAX:
            return _ei_series(x)
        return _ei_asymptotic(x)
    # x < 0: Ei(x) = -E1(-x)
    if -x <= _NEG_SERIES_MAX:
        return _ei_series(x)
    return -_e1_continued_fraction(-x)
