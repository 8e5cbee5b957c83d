"""Complex signal helpers.

Signals are plain ``complex128`` NumPy arrays (1-D or 2-D). Networks see them
as two real channels (real, imag); gradients with respect to a signal are
packed back as ``d/d(re) + 1j * d/d(im)`` so that the gradient of ``||x||^2``
is ``2 x``.
"""

import numpy as np

from .errors import InputError


def as_signal(x, name="signal", allow_empty=False):
    x = np.asarray(x)
    if x.size == 0 and not allow_empty:
        raise InputError(f"{name} is empty")
    x = x.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} contains non-finite entries")
    return x


def inner(u, v):
    """<u, v> = sum u_i conj(v_i)."""
    return complex(np.vdot(v, u))


def norm(u):
    return float(np.linalg.norm(np.ravel(u)))


def as_image(x):
    """View a 1-D signal as a single-row image; 2-D signals pass through."""
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise InputError(f"expected a 1-D or 2-D signal, got shape {x.shape}")
    return x


def to_channels(x):
    """Stack a batch of complex images (N, H, W) or one image (H, W) as (N, 2, H, W)."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim == 2:
        x = x[None]
    return np.ascontiguousarray(np.stack([x.real, x.imag], axis=1), dtype=np.float64)


def from_channels(z, shape=None):
    """Inverse of :func:`to_channels`. Returns (N, H, W), or ``shape`` if given."""
    out = z[:, 0] + 1j * z[:, 1]
    if shape is not None:
        out = out.reshape(shape)
    return out
