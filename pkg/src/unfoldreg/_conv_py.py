"""NumPy implementation of the 2-D 'same' convolution kernels.

Mirrors the compiled module in ``_conv.pyx`` and is used when the extension
is unavailable or ``UNFOLDREG_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (N, C, H, W, kh, kw)
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))


def conv2d(x, w):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            "channel mismatch: input has %d, weight expects %d" % (x.shape[1], w.shape[1])
        )
    win = _windows(x, w.shape[2], w.shape[3])
    return np.ascontiguousarray(np.einsum("nchwpq,ocpq->nohw", win, w, optimize=True))


def conv2d_grad_input(gy, w):
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape[0] != gy.shape[1]:
        raise ValueError(
            "channel mismatch: gradient has %d, weight expects %d" % (gy.shape[1], w.shape[0])
        )
    # transpose of a correlation is a correlation with the flipped, swapped kernel
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d(gy, wt)


def conv2d_grad_weight(x, gy, kh, kw):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    if gy.shape[0] != x.shape[0] or gy.shape[2:] != x.shape[2:]:
        raise ValueError("gradient shape does not match input shape")
    win = _windows(x, kh, kw)
    return np.ascontiguousarray(np.einsum("nchwpq,nohw->ocpq", win, gy, optimize=True))
