"""Slow, deliberately naive reference implementations used only by tests."""

import math

import numpy as np


def naive_centered(rows):
    n = len(rows)
    dist = [[math.dist(rows[i], rows[j]) for j in range(n)] for i in range(n)]
    row_mean = [sum(r) / n for r in dist]
    col_mean = [sum(dist[i][j] for i in range(n)) / n for j in range(n)]
    grand = sum(row_mean) / n
    return [[dist[i][j] - row_mean[i] - col_mean[j] + grand for j in range(n)] for i in range(n)]


def naive_dcov2(a, b):
    n = len(a)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += a[i][j] * b[i][j]
    return total / (n * n)


def naive_dcor(x, y):
    x = [tuple(r) for r in np.atleast_2d(np.asarray(x, dtype=float).reshape(len(x), -1))]
    y = [tuple(r) for r in np.atleast_2d(np.asarray(y, dtype=float).reshape(len(y), -1))]
    a, b = naive_centered(x), naive_centered(y)
    cross = math.sqrt(max(0.0, naive_dcov2(a, b)))
    var_a = math.sqrt(max(0.0, naive_dcov2(a, a)))
    var_b = math.sqrt(max(0.0, naive_dcov2(b, b)))
    if var_a < 1e-12 or var_b < 1e-12:
        return 0.0
    return cross / math.sqrt(var_a * var_b)


def central_differences(f, x, h=1e-4):
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad
