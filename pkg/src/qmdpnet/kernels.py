"""Hot numeric kernels with a compiled backend and a numpy fallback.

The backend is picked once at import: the Cython extension ``_ckernels`` when
it was built, otherwise the numpy implementations below. Set
``QMDPNET_BACKEND=python`` to force the fallback (used by the benchmark and by
the backend-parity tests).

All functions take C-contiguous float64 arrays in (B, H, W, C) layout and conv
kernels in (kh, kw, Cin, Cout) layout with zero "same" padding.
"""

from __future__ import annotations

import os

import numpy as np


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def np_conv2d_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    B, H, W, _ = x.shape
    kh, kw, _, co = k.shape
    xp = _pad(x, (kh - 1) // 2, (kw - 1) // 2)
    out = np.zeros((B, H, W, co))
    for di in range(kh):
        for dj in range(kw):
            out += xp[:, di:di + H, dj:dj + W, :] @ k[di, dj]
    return out


def np_conv2d_backward_input(gy: np.ndarray, k: np.ndarray) -> np.ndarray:
    B, H, W, _ = gy.shape
    kh, kw, ci, _ = k.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gxp = np.zeros((B, H + 2 * ph, W + 2 * pw, ci))
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di:di + H, dj:dj + W, :] += gy @ k[di, dj].T
    return np.ascontiguousarray(gxp[:, ph:ph + H, pw:pw + W, :])


def np_conv2d_backward_kernel(x: np.ndarray, gy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, H, W, ci = x.shape
    co = gy.shape[3]
    xp = _pad(x, (kh - 1) // 2, (kw - 1) // 2)
    g2 = gy.reshape(-1, co)
    gk = np.empty((kh, kw, ci, co))
    for di in range(kh):
        for dj in range(kw):
            gk[di, dj] = xp[:, di:di + H, dj:dj + W, :].reshape(-1, ci).T @ g2
    return gk


def np_group_max_forward(x: np.ndarray, groups: int) -> tuple[np.ndarray, np.ndarray]:
    B, H, W, ct = x.shape
    c = ct // groups
    xr = x.reshape(B, H, W, groups, c)
    local = np.argmax(xr, axis=-1)  # first occurrence on ties
    y = np.take_along_axis(xr, local[..., None], axis=-1)[..., 0]
    idx = local + (np.arange(groups) * c)
    return np.ascontiguousarray(y), idx.astype(np.int64)


def np_group_max_backward(gy: np.ndarray, idx: np.ndarray, channels: int) -> np.ndarray:
    B, H, W, _ = gy.shape
    gx = np.zeros((B, H, W, channels))
    np.put_along_axis(gx, idx, gy, axis=-1)
    return gx


_NUMPY = {
    "conv2d_forward": np_conv2d_forward,
    "conv2d_backward_input": np_conv2d_backward_input,
    "conv2d_backward_kernel": np_conv2d_backward_kernel,
    "group_max_forward": np_group_max_forward,
    "group_max_backward": np_group_max_backward,
}


def _load_compiled():
    try:
        from qmdpnet import _ckernels
    except ImportError:
        return None
    return {name: getattr(_ckernels, name) for name in _NUMPY}


_COMPILED = None if os.environ.get("QMDPNET_BACKEND", "").lower() == "python" else _load_compiled()
BACKEND = "compiled" if _COMPILED is not None else "python"

# Above this many multiply-adds per input pixel the BLAS-backed numpy path wins
# over the scalar compiled loops (wide f_Z / f_R layers).
_WIDE = 64


def compiled_available() -> bool:
    return _COMPILED is not None


def get_backend(name: str | None = None) -> dict:
    """Return the kernel table for ``name`` ("compiled" or "python"), default the active one."""
    name = name or BACKEND
    if name == "python":
        return dict(_NUMPY)
    if _COMPILED is None:
        raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
    return dict(_COMPILED)


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, k):
    if _COMPILED is not None and k.shape[2] * k.shape[3] <= _WIDE:
        return _COMPILED["conv2d_forward"](_c(x), _c(k))
    return np_conv2d_forward(x, k)


def conv2d_backward_input(gy, k):
    if _COMPILED is not None and k.shape[2] * k.shape[3] <= _WIDE:
        return _COMPILED["conv2d_backward_input"](_c(gy), _c(k))
    return np_conv2d_backward_input(gy, k)


def conv2d_backward_kernel(x, gy, kh, kw):
    if _COMPILED is not None and x.shape[3] * gy.shape[3] <= _WIDE:
        return _COMPILED["conv2d_backward_kernel"](_c(x), _c(gy), kh, kw)
    return np_conv2d_backward_kernel(x, gy, kh, kw)


def group_max_forward(x, groups):
    if _COMPILED is not None:
        return _COMPILED["group_max_forward"](_c(x), groups)
    return np_group_max_forward(x, groups)


def group_max_backward(gy, idx, channels):
    if _COMPILED is not None:
        return _COMPILED["group_max_backward"](_c(gy), np.ascontiguousarray(idx, dtype=np.int64), channels)
    return np_group_max_backward(gy, idx, channels)
