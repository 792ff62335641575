"""Hot numeric kernels with two interchangeable backends.

``numba`` (default, @njit-compiled) and ``numpy`` expose identical function
contracts. Selection order:

1. the ``HEADSIM_BACKEND`` env var (``numba`` or ``numpy``), read at import;
2. otherwise ``numba`` when importable, else ``numpy``.

:func:`set_backend` switches at runtime (used by tests and the benchmark).
Matrix products are not kernels: they always go through BLAS in the model.
"""

import os

from . import reference

_KERNEL_NAMES = (
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_lastdim",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "adamw_update",
    "value_noise",
    "rgb_to_hsv",
)

_BACKENDS = {"numpy": reference}

try:  # numba is optional at runtime
    from . import jitted

    _BACKENDS["numba"] = jitted
except ImportError:  # pragma: no cover - exercised only without numba
    jitted = None

_active_name = None
_active = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> str:
    """Select the active kernel backend; returns the previous backend name."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    previous = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return previous


def backend_name() -> str:
    return _active_name


def get_backend(name: str):
    """Module object for a named backend (for side-by-side benchmarking)."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    return _BACKENDS[name]


def _default_backend() -> str:
    env = os.environ.get("HEADSIM_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise RuntimeError(
                f"HEADSIM_BACKEND={env!r} not available; choices: {available_backends()}"
            )
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


set_backend(_default_backend())


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    return _active.layer_norm_forward(x, gamma, beta, eps)


def layer_norm_backward(dy, x, gamma, mean, rstd):
    return _active.layer_norm_backward(dy, x, gamma, mean, rstd)


def softmax_lastdim(x):
    return _active.softmax_lastdim(x)


def softmax_backward(dp, p):
    return _active.softmax_backward(dp, p)


def gelu_forward(x):
    return _active.gelu_forward(x)


def gelu_backward(dy, x):
    return _active.gelu_backward(dy, x)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    return _active.adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step)


def value_noise(height, width, cell, seed, octaves=2):
    return _active.value_noise(height, width, cell, seed, octaves)


def rgb_to_hsv(rgb):
    return _active.rgb_to_hsv(rgb)
