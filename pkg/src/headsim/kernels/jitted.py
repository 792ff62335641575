"""Numba @njit kernel implementations.

Same contracts as :mod:`headsim.kernels.reference`; row reductions accumulate
in float64 for stability. fastmath stays off and kernels
stay single-threaded (BLAS owns the cores here; on a 2-core box per-call
thread-pool sync costs more than it buys), so results are reproducible run
to run.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def layer_norm_forward(x, gamma, beta, eps=1e-5):
    rows, dim = x.shape
    y = np.empty_like(x)
    mean = np.empty(rows, dtype=x.dtype)
    rstd = np.empty(rows, dtype=x.dtype)
    for i in range(rows):
        acc = 0.0
        for j in range(dim):
            acc += x[i, j]
        mu = acc / dim
        acc = 0.0
        for j in range(dim):
            t = x[i, j] - mu
            acc += t * t
        rs = 1.0 / math.sqrt(acc / dim + eps)
        mean[i] = mu
        rstd[i] = rs
        for j in range(dim):
            y[i, j] = (x[i, j] - mu) * rs * gamma[j] + beta[j]
    return y, mean, rstd


@njit(cache=True)
def layer_norm_backward(dy, x, gamma, mean, rstd):
    rows, dim = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(dim, dtype=x.dtype)
    dbeta = np.zeros(dim, dtype=x.dtype)
    for i in range(rows):
        mu = mean[i]
        rs = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(dim):
            xhat = (x[i, j] - mu) * rs
            dxh = dy[i, j] * gamma[j]
            s1 += dxh
            s2 += dxh * xhat
            dgamma[j] += dy[i, j] * xhat
            dbeta[j] += dy[i, j]
        m1 = s1 / dim
        m2 = s2 / dim
        for j in range(dim):
            xhat = (x[i, j] - mu) * rs
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = rs * (dxh - m1 - xhat * m2)
    return dx, dgamma, dbeta


@njit(cache=True)
def softmax_lastdim(x):
    rows, dim = x.shape
    p = np.empty_like(x)
    for i in range(rows):
        hi = x[i, 0]
        for j in range(1, dim):
            if x[i, j] > hi:
                hi = x[i, j]
        total = 0.0
        for j in range(dim):
            e = math.exp(x[i, j] - hi)
            p[i, j] = e
            total += e
        inv = 1.0 / total
        for j in range(dim):
            p[i, j] *= inv
    return p


@njit(cache=True)
def softmax_backward(dp, p):
    rows, dim = p.shape
    dx = np.empty_like(p)
    for i in range(rows):
        inner = 0.0
        for j in range(dim):
            inner += dp[i, j] * p[i, j]
        for j in range(dim):
            dx[i, j] = p[i, j] * (dp[i, j] - inner)
    return dx


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def gelu_forward(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


@njit(cache=True)
def gelu_backward(dy, x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        out[i] = dy[i] * (cdf + v * pdf)
    return out


@njit(cache=True)
def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / c1
        vhat = v[i] / c2
        param[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * param[i])


@njit(cache=True, inline="always")
def _hash01(ix, iy, salt):
    z = ix * np.uint64(0x2545F4914F6CDD1D) + iy * np.uint64(0x9E3779B97F4A7C15) + salt
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def value_noise(height, width, cell, seed, octaves=2):
    acc = np.zeros((height, width), dtype=np.float64)
    amp = 1.0
    total = 0.0
    c = float(cell)
    for octave in range(octaves):
        salt = np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(octave + 1)
        for yi in range(height):
            gy = yi / c
            iy = np.uint64(math.floor(gy))
            ty = gy - math.floor(gy)
            uy = ty * ty * (3.0 - 2.0 * ty)
            for xi in range(width):
                gx = xi / c
                ix = np.uint64(math.floor(gx))
                tx = gx - math.floor(gx)
                ux = tx * tx * (3.0 - 2.0 * tx)
                one = np.uint64(1)
                v00 = _hash01(ix, iy, salt)
                v10 = _hash01(ix + one, iy, salt)
                v01 = _hash01(ix, iy + one, salt)
                v11 = _hash01(ix + one, iy + one, salt)
                top = v00 + (v10 - v00) * ux
                bot = v01 + (v11 - v01) * ux
                acc[yi, xi] += amp * (top + (bot - top) * uy)
        total += amp
        amp *= 0.5
        c = max(c * 0.5, 1.0)
    return (acc / total).astype(np.float32)


@njit(cache=True)
def rgb_to_hsv(rgb):
    n = rgb.shape[0]
    out = np.empty_like(rgb)
    for i in range(n):
        r = rgb[i, 0]
        g = rgb[i, 1]
        b = rgb[i, 2]
        maxc = max(r, max(g, b))
        minc = min(r, min(g, b))
        delta = maxc - minc
        v = maxc
        s = delta / maxc if maxc > 0 else 0.0
        if delta > 0:
            rc = (maxc - r) / delta
            gc = (maxc - g) / delta
            bc = (maxc - b) / delta
            if r == maxc:
                h = bc - gc
            elif g == maxc:
                h = 2.0 + rc - bc
            else:
                h = 4.0 + gc - rc
            h = (h / 6.0) % 1.0
        else:
            h = 0.0
        out[i, 0] = h
        out[i, 1] = s
        out[i, 2] = v
    return out
