"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``CAPFORGE_NUMBA`` is not
``0``.  Both paths produce bitwise-identical results; ``use_backend`` switches
at runtime (tests and the kernel benchmark run both).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_ENABLED = _HAVE_NUMBA and os.environ.get("CAPFORGE_NUMBA", "1") != "0"


def backend() -> str:
    return "numba" if _ENABLED else "numpy"


def use_backend(name: str) -> None:
    global _ENABLED
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _ENABLED = name == "numba"


# --------------------------------------------------------------------------
# convolution backward: scatter 3x3 patch gradients onto the padded input

def _col2im_numpy(dpatch: np.ndarray) -> np.ndarray:
    b, h, w, kh, kw, c = dpatch.shape
    out = np.zeros((b, h + kh - 1, w + kw - 1, c))
    for di in range(kh):
        for dj in range(kw):
            out[:, di:di + h, dj:dj + w, :] += dpatch[:, :, :, di, dj, :]
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _col2im_numba(dpatch):
        b, h, w, kh, kw, c = dpatch.shape
        out = np.zeros((b, h + kh - 1, w + kw - 1, c))
        # same accumulation order as the numpy path: offset-major
        for di in range(kh):
            for dj in range(kw):
                for n in range(b):
                    for i in range(h):
                        for j in range(w):
                            for k in range(c):
                                out[n, i + di, j + dj, k] += dpatch[n, i, j, di, dj, k]
        return out


def col2im(dpatch: np.ndarray) -> np.ndarray:
    """Sum ``(B, H, W, kh, kw, C)`` patch grads into a ``(B, H+kh-1, W+kw-1, C)`` grid."""
    if _ENABLED:
        return _col2im_numba(np.ascontiguousarray(dpatch))
    return _col2im_numpy(dpatch)


# --------------------------------------------------------------------------
# 2x2 max pooling; ties resolve to the first window element in row-major order

def _maxpool_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(b, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def _maxpool_back_numpy(grad: np.ndarray, arg: np.ndarray) -> np.ndarray:
    b, ho, wo, c = grad.shape
    onehot = (arg[..., None] == np.arange(4)).astype(np.float64) * grad[..., None]
    onehot = onehot.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return onehot.reshape(b, ho * 2, wo * 2, c)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _maxpool_numba(x):
        b, h, w, c = x.shape
        out = np.empty((b, h // 2, w // 2, c))
        arg = np.empty((b, h // 2, w // 2, c), dtype=np.int8)
        for n in range(b):
            for i in range(h // 2):
                for j in range(w // 2):
                    for k in range(c):
                        best = x[n, 2 * i, 2 * j, k]
                        at = 0
                        for q in range(1, 4):
                            v = x[n, 2 * i + q // 2, 2 * j + q % 2, k]
                            if v > best:
                                best = v
                                at = q
                        out[n, i, j, k] = best
                        arg[n, i, j, k] = at
        return out, arg

    @njit(cache=True)
    def _maxpool_back_numba(grad, arg):
        b, ho, wo, c = grad.shape
        out = np.zeros((b, ho * 2, wo * 2, c))
        for n in range(b):
            for i in range(ho):
                for j in range(wo):
                    for k in range(c):
                        q = arg[n, i, j, k]
                        out[n, 2 * i + q // 2, 2 * j + q % 2, k] = grad[n, i, j, k]
        return out


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return pooled values and the winning window slot (0..3) per output cell."""
    if _ENABLED:
        return _maxpool_numba(np.ascontiguousarray(x))
    return _maxpool_numpy(x)


def maxpool2x2_backward(grad: np.ndarray, arg: np.ndarray) -> np.ndarray:
    if _ENABLED:
        return _maxpool_back_numba(np.ascontiguousarray(grad), np.ascontiguousarray(arg))
    return _maxpool_back_numpy(grad, arg)


# --------------------------------------------------------------------------
# longest common subsequence over integer-coded tokens

def _lcs_python(a: np.ndarray, b: np.ndarray) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


if _HAVE_NUMBA:

    @njit(cache=True)
    def _lcs_numba(a, b):
        m = b.shape[0]
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(a.shape[0]):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                else:
                    cur[j + 1] = max(prev[j + 1], cur[j])
            prev, cur = cur, prev
        return prev[m]


def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
    if _ENABLED:
        return int(_lcs_numba(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))
    return _lcs_python(list(a), list(b))
