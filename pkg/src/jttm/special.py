"""
Regularized incomplete gamma and beta functions.

Series / continued-fraction evaluation in the style of Numerical Recipes
(chapter 6), with modified Lentz iteration for the continued fractions.
Used for the chi-squared tail in the outlier filter and the Student-t
tail in the paired t-test.
"""
import math

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_series(a, x):
    # P(a, x) by its power series; converges quickly for x < a + 1
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise ArithmeticError(f"gamma series did not converge (a={a}, x={x})")


def _gamma_continued_fraction(a, x):
    # Q(a, x) by Lentz's method; converges quickly for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise ArithmeticError(f"gamma continued fraction did not converge (a={a}, x={x})")


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_continued_fraction(a, x)


def gammainc_upper(a, x):
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).

    Evaluated directly in the tail so that tiny probabilities keep their
    relative precision.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def _beta_continued_fraction(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges rapidly only on this side of the mode
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def chi2_cdf(df, t):
    """Lower-tail chi-squared CDF, P(df/2, t/2)."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    return gammainc_lower(df / 2.0, t / 2.0)


def chi2_sf(df, t):
    """Upper-tail chi-squared probability, 1 - chi2_cdf(df, t)."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    return gammainc_upper(df / 2.0, t / 2.0)


def chi2_upper_quantile(df, alpha, tol=1e-10):
    """Threshold t* with chi2_sf(df, t*) = alpha, by bisection."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if df <= 0:
        raise ValueError("df must be positive")
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_sf(df, hi) > alpha:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if chi2_sf(df, mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def student_t_sf_two_sided(t, dof):
    """Two-sided tail probability P(|T| >= |t|) for Student's t with `dof` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def student_t_cdf(t, dof):
    tail = 0.5 * student_t_sf_two_sided(t, dof)
    return 1.0 - tail if t > 0 else tail
