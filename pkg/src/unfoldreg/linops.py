"""Linear forward operators with adjoints, pseudo-inverses and ||A|| <= 1.

Three kinds are provided:

``MaskedDFT``
    Unitary DFT (centred spectrum) followed by binary sampling. The
    measurement is the vector of sampled coefficients, so ``A A* = I`` and the
    zero-filled adjoint is the exact pseudo-inverse.
``Convolution``
    Circular convolution with a small kernel, diagonalised by the FFT.
``DenseMatrix``
    An explicit matrix acting on the flattened signal.

All operators accept an optional leading batch axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .signals import as_signal, norm

_NORM_SLACK = 1.0 + 1e-6


class ForwardOp:
    kind = "abstract"
    input_shape: tuple
    output_shape: tuple

    def _check(self, x, shape, what):
        # a zero mask gives an empty measurement space
        x = as_signal(x, what, allow_empty=int(np.prod(shape)) == 0)
        nd = len(shape)
        if x.shape[x.ndim - nd:] != tuple(shape) or x.ndim > nd + 1:
            raise InputError(f"{what} has shape {x.shape}, operator expects {tuple(shape)}")
        return x

    def apply(self, x):
        return self._apply(self._check(x, self.input_shape, "input"))

    def adjoint(self, r):
        return self._adjoint(self._check(r, self.output_shape, "measurement"))

    def pseudo_inverse(self, y):
        return self._pinv(self._check(y, self.output_shape, "measurement"))

    def normal(self, x):
        """A* A x."""
        return self.adjoint(self.apply(x))

    @property
    def norm_bound(self):
        """An upper bound on ||A||, never above 1."""
        raise NotImplementedError

    __call__ = apply


class MaskedDFT(ForwardOp):
    """A x = mask-sampled entries of fftshift(fftn(x, norm='ortho'))."""

    kind = "masked-dft"

    def __init__(self, mask):
        mask = np.asarray(mask)
        if mask.size == 0 or mask.ndim not in (1, 2):
            raise InputError("mask must be a non-empty 1-D or 2-D array")
        if not np.all((mask == 0) | (mask == 1)):
            raise InputError("mask must be binary")
        self.mask = mask.astype(bool)
        self.mask.setflags(write=False)
        self.input_shape = self.mask.shape
        self.output_shape = (int(self.mask.sum()),)
        self._axes = tuple(range(-self.mask.ndim, 0))

    def spectrum(self, x):
        """Full centred unitary spectrum of ``x``."""
        return np.fft.fftshift(np.fft.fftn(x, axes=self._axes, norm="ortho"), axes=self._axes)

    def inverse_spectrum(self, k):
        return np.fft.ifftn(np.fft.ifftshift(k, axes=self._axes), axes=self._axes, norm="ortho")

    def sample(self, k):
        """Zero out unsampled coefficients of a full spectrum (idempotent)."""
        return np.where(self.mask, k, 0)

    def zero_fill(self, r):
        k = np.zeros(r.shape[:-1] + self.input_shape, dtype=np.complex128)
        k[..., self.mask] = r
        return k

    def _apply(self, x):
        return self.spectrum(x)[..., self.mask]

    def _adjoint(self, r):
        return self.inverse_spectrum(self.zero_fill(r))

    def _pinv(self, y):
        # A A* = I on the measurement space, so A^dagger = A*
        return self._adjoint(y)

    @property
    def norm_bound(self):
        return 1.0 if self.mask.any() else 0.0


class Convolution(ForwardOp):
    """Circular convolution with ``kernel`` (centred at its middle element).

    If the operator norm exceeds 1 the kernel is rescaled at construction.
    """

    kind = "convolution"

    def __init__(self, kernel, shape, rcond=1e-10):
        kernel = np.asarray(kernel, dtype=np.complex128)
        shape = tuple(int(s) for s in shape)
        if kernel.ndim != len(shape) or any(k > s for k, s in zip(kernel.shape, shape)):
            raise InputError(f"kernel {kernel.shape} incompatible with signal shape {shape}")
        padded = np.zeros(shape, dtype=np.complex128)
        padded[tuple(slice(0, k) for k in kernel.shape)] = kernel
        padded = np.roll(padded, [-(k // 2) for k in kernel.shape], axis=tuple(range(len(shape))))
        self._axes = tuple(range(-len(shape), 0))
        transfer = np.fft.fftn(padded)
        peak = float(np.abs(transfer).max())
        self.scale = 1.0
        if peak > 1.0:
            self.scale = 1.0 / (peak * _NORM_SLACK)
        self.kernel = kernel * self.scale
        self.transfer = transfer * self.scale
        self.rcond = rcond
        self.input_shape = shape
        self.output_shape = shape

    def _apply(self, x):
        return np.fft.ifftn(self.transfer * np.fft.fftn(x, axes=self._axes), axes=self._axes)

    def _adjoint(self, r):
        return np.fft.ifftn(
            np.conj(self.transfer) * np.fft.fftn(r, axes=self._axes), axes=self._axes
        )

    def _pinv(self, y):
        mag = np.abs(self.transfer)
        keep = mag > self.rcond * max(mag.max(), np.finfo(float).tiny)
        inv = np.zeros_like(self.transfer)
        inv[keep] = 1.0 / self.transfer[keep]
        return np.fft.ifftn(inv * np.fft.fftn(y, axes=self._axes), axes=self._axes)

    @property
    def norm_bound(self):
        return float(np.abs(self.transfer).max())


class DenseMatrix(ForwardOp):
    """A x = M @ vec(x). Rescaled at construction if ||M||_2 > 1."""

    kind = "dense-matrix"

    def __init__(self, matrix, input_shape=None, rcond=1e-12):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.complex128))
        if matrix.ndim != 2 or matrix.size == 0:
            raise InputError("matrix must be a non-empty 2-D array")
        m, n = matrix.shape
        if input_shape is None:
            input_shape = (n,)
        input_shape = tuple(int(s) for s in input_shape)
        if int(np.prod(input_shape)) != n:
            raise InputError(f"input shape {input_shape} has no {n} entries")
        spec = float(np.linalg.norm(matrix, 2))
        self.scale = 1.0 / (spec * _NORM_SLACK) if spec > 1.0 else 1.0
        self.matrix = matrix * self.scale
        self.rcond = rcond
        self.input_shape = input_shape
        self.output_shape = (m,)

    def _flat(self, x):
        nd = len(self.input_shape)
        return x.reshape(x.shape[: x.ndim - nd] + (-1,))

    def _apply(self, x):
        return self._flat(x) @ self.matrix.T

    def _adjoint(self, r):
        out = r @ self.matrix.conj()
        return out.reshape(r.shape[:-1] + self.input_shape)

    def _pinv(self, y):
        rhs = y.T if y.ndim == 2 else y
        sol = np.linalg.lstsq(self.matrix, rhs, rcond=self.rcond)[0]
        sol = sol.T if y.ndim == 2 else sol
        return sol.reshape(y.shape[:-1] + self.input_shape)

    @property
    def norm_bound(self):
        return float(np.linalg.norm(self.matrix, 2))


def estimate_norm(op, iters=50, seed=0):
    """Power-iteration estimate of ||A|| (a lower bound that converges to it)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.input_shape) + 1j * rng.standard_normal(op.input_shape)
    x /= norm(x)
    est = 0.0
    for _ in range(iters):
        z = op.normal(x)
        est = norm(z)
        if est == 0.0:
            return 0.0
        x = z / est
    return float(np.sqrt(est))


@dataclass(frozen=True)
class NoisyMeasurement:
    y: np.ndarray
    y_delta: np.ndarray
    delta: float


def add_noise(y, delta=None, seed=0, level=None, complex_noise=None):
    """Add Gaussian noise rescaled to norm exactly ``delta``.

    Give either an absolute ``delta`` or a relative ``level`` (``delta =
    level * ||y||``). Noise is complex unless ``y`` is a real array.
    """
    if (delta is None) == (level is None):
        raise InputError("give exactly one of delta or level")
    if complex_noise is None:
        complex_noise = np.iscomplexobj(y)
    y = as_signal(y, "measurement")
    if level is not None:
        if level < 0:
            raise InputError("noise level must be >= 0")
        delta = float(level) * norm(y)
    if delta < 0:
        raise InputError("delta must be >= 0")
    delta = float(delta)
    if delta == 0.0:
        return NoisyMeasurement(y, y.copy(), 0.0)
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(y.shape).astype(np.complex128)
    if complex_noise:
        n += 1j * rng.standard_normal(y.shape)
    n *= delta / norm(n)
    return NoisyMeasurement(y, y + n, delta)


# -- sampling masks ---------------------------------------------------------


def _center_band(n):
    width = max(4, n // 16)
    start = n // 2 - width // 2
    return slice(max(start, 0), min(start + width, n))


def uniform_1d_mask(shape, R):
    """Every ``R``-th column plus a fully sampled centre band of columns."""
    shape = tuple(shape)
    cols = np.zeros(shape[-1], dtype=bool)
    cols[::R] = True
    cols[_center_band(shape[-1])] = True
    return np.broadcast_to(cols, shape).astype(np.int8)


def uniform_2d_mask(shape, R):
    """A regular lattice keeping about 1/R of the points, plus a centre square."""
    h, w = shape
    step = max(1, int(round(np.sqrt(R))))
    mask = np.zeros((h, w), dtype=np.int8)
    mask[::step, ::step] = 1
    mask[_center_band(h), _center_band(w)] = 1
    return mask


def random_1d_mask(shape, fraction, seed=0):
    """Random columns (fraction of all columns) including the centre band."""
    shape = tuple(shape)
    n = shape[-1]
    rng = np.random.default_rng(seed)
    cols = np.zeros(n, dtype=bool)
    cols[_center_band(n)] = True
    target = int(round(fraction * n))
    free = np.flatnonzero(~cols)
    extra = max(0, target - int(cols.sum()))
    cols[rng.choice(free, size=min(extra, free.size), replace=False)] = True
    return np.broadcast_to(cols, shape).astype(np.int8)


def random_2d_mask(shape, fraction, seed=0):
    """Random points (fraction of all points) including a centre square."""
    h, w = shape
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), dtype=bool)
    mask[_center_band(h), _center_band(w)] = True
    target = int(round(fraction * h * w))
    free = np.flatnonzero(~mask.ravel())
    extra = max(0, target - int(mask.sum()))
    pick = rng.choice(free, size=min(extra, free.size), replace=False)
    mask.ravel()[pick] = True
    return mask.astype(np.int8)


def make_mask(kind, shape, fraction=0.25, R=4, seed=0):
    if kind == "uniform-1d":
        return uniform_1d_mask(shape, R)
    if kind == "uniform-2d":
        return uniform_2d_mask(shape, R)
    if kind == "random-1d":
        return random_1d_mask(shape, fraction, seed)
    if kind == "random-2d":
        return random_2d_mask(shape, fraction, seed)
    if kind == "full":
        return np.ones(shape, dtype=np.int8)
    raise InputError(f"unknown mask kind {kind!r}")


def save_mask_csv(path, mask):
    np.savetxt(path, np.atleast_2d(np.asarray(mask, dtype=np.int64)), fmt="%d", delimiter=",")


def load_mask_csv(path):
    mask = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if not np.all((mask == 0) | (mask == 1)):
        raise InputError(f"{path}: mask entries must be 0 or 1")
    return mask.astype(np.int8)
