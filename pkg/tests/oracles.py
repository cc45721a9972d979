"""Independent oracles used by the test suite.

These deliberately avoid the package's own computational routes: the Bessel
pmf is a bare power series, and the Legendre transform is a grid scan
followed by golden-section refinement.
"""

import math

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def bessel_pmf(x: int, kappa: float, t: float) -> float:
    """P(X_t = x) = e^(-kappa t) I_x(kappa t) for the rate-kappa walk on Z."""
    z = kappa * t
    n = abs(int(x))
    total = 0.0
    term_k = (z / 2.0) ** n / math.factorial(n)
    k = 0
    while k < 500:
        total += term_k
        term_k *= (z / 2.0) ** 2 / ((k + 1.0) * (k + 1.0 + n))
        if k > 3 and term_k < 1e-25 * max(total, 1e-280):
            break
        k += 1
    return math.exp(-z) * total


def _golden_max(f, lo, hi, iters=200):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    m = 0.5 * (a + b)
    return f(m)


def legendre_bruteforce(kappa: float, x) -> float:
    """sup_lam { <lam, x> - Lambda(lam) } by per-coordinate grid + golden scan.

    Valid for the isotropic walk, whose cumulant separates over coordinates.
    """
    d = len(x)
    k_d = kappa / d
    total = 0.0
    for xi in x:
        def obj(l, xi=xi):
            return xi * l - k_d * (math.cosh(l) - 1.0)

        # coarse grid bracket around the growing direction
        span = max(5.0, 2.0 * abs(math.asinh(xi / k_d)))
        grid = [lo + j * (2 * span) / 400 for lo, j in ((-span, j) for j in range(401))]
        best = max(grid, key=obj)
        total += _golden_max(obj, best - 0.2 * span, best + 0.2 * span)
    return total
