"""Pure-numpy kernel implementations.

This is the fallback backend and the semantic reference for
:mod:`headsim.kernels.jitted`. All functions take/return contiguous arrays;
shapes are flattened to 2-D (rows, features) by callers where relevant.
Matrix products are deliberately absent: those always go through BLAS via
``numpy.matmul`` in the model code.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    """Row-wise layer norm. Returns (y, mean, rstd) with mean/rstd per row."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_backward(dy, x, gamma, mean, rstd):
    """Backward of layer_norm_forward. Returns (dx, dgamma, dbeta)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def softmax_lastdim(x):
    """Row-wise softmax with max subtraction."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dp, p):
    """Backward of softmax: dx = p * (dp - sum(dp * p))."""
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def gelu_forward(x):
    """Exact (erf-based) GELU, elementwise."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_backward(dy, x):
    """Backward of exact GELU."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """Decoupled-weight-decay Adam step, in place on param/m/v (flat views).

    ``step`` is the 1-based update count used for bias correction.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)
_LAT_X = np.uint64(0x2545F4914F6CDD1D)
_LAT_Y = np.uint64(0x9E3779B97F4A7C15)


def _hash01(ix, iy, salt):
    """Lattice hash -> float64 in [0, 1). ix/iy are uint64 arrays."""
    z = ix * _LAT_X + iy * _LAT_Y + np.uint64(salt)
    z = z + _MIX1
    z = (z ^ (z >> np.uint64(30))) * _MIX2
    z = (z ^ (z >> np.uint64(27))) * _MIX3
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def value_noise(height, width, cell, seed, octaves=2):
    """Seeded multi-octave value noise in [0, 1), shape (height, width).

    Lattice values come from an integer hash of (cell coords, octave, seed),
    interpolated with a smoothstep, halving cell size and amplitude per
    octave. Bit-deterministic for fixed arguments.
    """
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    acc = np.zeros((height, width), dtype=np.float64)
    amp = 1.0
    total = 0.0
    c = float(cell)
    for octave in range(octaves):
        salt = (np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(octave + 1)) & np.uint64(
            0xFFFFFFFFFFFFFFFF
        )
        gx = xs / c
        gy = ys / c
        ix = np.floor(gx)
        iy = np.floor(gy)
        tx = gx - ix
        ty = gy - iy
        ux = tx * tx * (3.0 - 2.0 * tx)
        uy = ty * ty * (3.0 - 2.0 * ty)
        ix = ix.astype(np.uint64)
        iy = iy.astype(np.uint64)
        one = np.uint64(1)
        v00 = _hash01(ix, iy, salt)
        v10 = _hash01(ix + one, iy, salt)
        v01 = _hash01(ix, iy + one, salt)
        v11 = _hash01(ix + one, iy + one, salt)
        top = v00 + (v10 - v00) * ux
        bot = v01 + (v11 - v01) * ux
        acc += amp * (top + (bot - top) * uy)
        total += amp
        amp *= 0.5
        c = max(c * 0.5, 1.0)
    return (acc / total).astype(np.float32)


def rgb_to_hsv(rgb):
    """RGB in [0,1] (M, 3) -> HSV in [0,1] (M, 3), matplotlib convention."""
    r = rgb[:, 0]
    g = rgb[:, 1]
    b = rgb[:, 2]
    maxc = np.max(rgb, axis=1)
    minc = np.min(rgb, axis=1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / safe
        gc = (maxc - g) / safe
        bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    out = np.stack([h, s, v], axis=1)
    return out.astype(rgb.dtype, copy=False)
