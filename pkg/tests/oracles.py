"""Independent reference computations used by the tests.

These deliberately avoid numpy linear algebra and the package code so that
they can serve as a second route to the same numbers.
"""

import math
from fractions import Fraction


def gauss_solve(a, b):
    """Solve a x = b by Gaussian elimination with partial pivoting (pure Python)."""
    n = len(a)
    m = [list(map(float, row)) + [float(rhs)] for row, rhs in zip(a, b)]
    for k in range(n):
        p = max(range(k, n), key=lambda i: abs(m[i][k]))
        m[k], m[p] = m[p], m[k]
        for i in range(k + 1, n):
            f = m[i][k] / m[k][k]
            for j in range(k, n + 1):
                m[i][j] -= f * m[k][j]
    x = [0.0] * n
    for i in reversed(range(n)):
        s = m[i][n] - math.fsum(m[i][j] * x[j] for j in range(i + 1, n))
        x[i] = s / m[i][i]
    return x


def exp_variogram(h, nugget, sill, rng):
    if h == 0:
        return 0.0
    return nugget + (sill - nugget) * (1.0 - math.exp(-3.0 * h / rng))


def ordinary_krige(points, values, target, nugget, sill, rng):
    """Ordinary Kriging estimate at one target from the (n+1)x(n+1) system."""
    n = len(points)
    a = [[0.0] * (n + 1) for _ in range(n + 1)]
    b = [0.0] * (n + 1)
    for i in range(n):
        for j in range(n):
            a[i][j] = exp_variogram(math.dist(points[i], points[j]), nugget, sill, rng)
        a[i][n] = a[n][i] = 1.0
        b[i] = exp_variogram(math.dist(points[i], target), nugget, sill, rng)
    b[n] = 1.0
    w = gauss_solve(a, b)[:n]
    return math.fsum(wi * zi for wi, zi in zip(w, values))


def pearson_exact(x, y):
    """Pearson r with exact rational sums; only the final square root is inexact."""
    fx = [Fraction(v) for v in x]
    fy = [Fraction(v) for v in y]
    n = len(fx)
    mx, my = sum(fx) / n, sum(fy) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(fx, fy))
    sxx = sum((a - mx) ** 2 for a in fx)
    syy = sum((b - my) ** 2 for b in fy)
    return float(sxy) / math.sqrt(float(sxx) * float(syy))


def mape_ref(pairs, floor=1.0):
    used = [(Fraction(t), Fraction(p)) for t, p in pairs if t >= floor]
    return float(100 * sum(abs(t - p) / t for t, p in used) / len(used))


def r2_ref(pairs):
    ys = [Fraction(t) for t, _ in pairs]
    ps = [Fraction(p) for _, p in pairs]
    mean = sum(ys) / len(ys)
    ss_res = sum((y - p) ** 2 for y, p in zip(ys, ps))
    ss_tot = sum((y - mean) ** 2 for y in ys)
    return float(1 - ss_res / ss_tot)


def level_ref(value, bounds):
    """AQI level by linear scan: level k+1 when value is in [b_k, b_{k+1})."""
    level = 1
    for b in bounds:
        if value >= b:
            level += 1
    return level
