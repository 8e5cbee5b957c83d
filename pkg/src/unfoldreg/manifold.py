"""Synthetic convex data manifolds with exact projection and distance.

The manifold is a box of coefficients over an orthonormal real basis,
``M = {B c : c in [lo, hi]^d}``. Because the columns of ``B`` are orthonormal
and the box is separable, the projection is ``B clip(B^T Re x, lo, hi)``.
Manifold points are real; complex inputs are handled by treating the
imaginary part as orthogonal to ``M``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .linops import ForwardOp


def cosine_atoms(shape, d):
    """First ``d`` separable orthonormal DCT-II atoms, lowest total frequency first."""
    shape = tuple(shape)
    if len(shape) == 1:
        shape1 = (1, shape[0])
    else:
        shape1 = shape
    h, w = shape1

    def dct_matrix(n):
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
        mat[0] *= 1.0 / np.sqrt(2.0)
        return mat * np.sqrt(2.0 / n)

    ch, cw = dct_matrix(h), dct_matrix(w)
    order = sorted(((a + b, a, b) for a in range(h) for b in range(w)), key=lambda t: (t[0], t[1]))
    if d > len(order):
        raise ConfigError(f"cannot take {d} atoms from a {h}x{w} grid")
    cols = [np.outer(ch[a], cw[b]).ravel() for _, a, b in order[:d]]
    return np.stack(cols, axis=1)


def random_atoms(shape, d, seed=0):
    n = int(np.prod(shape))
    if d > n:
        raise ConfigError(f"cannot take {d} orthonormal vectors in dimension {n}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, d)))
    return q


@dataclass(frozen=True)
class SyntheticManifold:
    basis: np.ndarray  # (n, d), orthonormal columns
    lo: float
    hi: float
    shape: tuple
    atoms: str = "cosine"
    seed: int = 0

    @classmethod
    def create(cls, shape, d, lo=-1.0, hi=1.0, atoms="cosine", seed=0):
        shape = tuple(int(s) for s in shape)
        if not lo < hi:
            raise ConfigError(f"empty coefficient box [{lo}, {hi}]")
        if atoms == "cosine":
            basis = cosine_atoms(shape, d)
        elif atoms == "random":
            basis = random_atoms(shape, d, seed)
        else:
            raise ConfigError(f"unknown atom kind {atoms!r}")
        return cls(basis, float(lo), float(hi), shape, atoms, int(seed))

    @property
    def dim(self):
        return self.basis.shape[1]

    def _flat(self, x):
        x = np.asarray(x)
        nd = len(self.shape)
        if x.shape[x.ndim - nd:] != self.shape:
            raise InputError(f"signal shape {x.shape} does not match manifold shape {self.shape}")
        return x.reshape(x.shape[: x.ndim - nd] + (-1,))

    def embed(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        flat = coeffs @ self.basis.T
        return flat.reshape(coeffs.shape[:-1] + self.shape).astype(np.complex128)

    def coefficients(self, x):
        """B^T Re(x)."""
        return np.real(self._flat(x)) @ self.basis

    def sample(self, count, seed=0):
        """``count`` points drawn with coefficients uniform in the box."""
        if count < 0:
            raise InputError("count must be >= 0")
        rng = np.random.default_rng(seed)
        return self.embed(rng.uniform(self.lo, self.hi, size=(count, self.dim)))

    def project(self, x):
        return self.embed(np.clip(self.coefficients(x), self.lo, self.hi))

    def distance(self, x):
        x = np.asarray(x)
        diff = self._flat(x - self.project(x))
        return np.linalg.norm(diff, axis=-1) if diff.ndim > 1 else float(np.linalg.norm(diff))

    def contains(self, x, tol=1e-10):
        return np.all(np.asarray(self.distance(x)) <= tol)


@dataclass(frozen=True)
class Certificate:
    """Uniqueness certificate: A is injective on span(B) iff the Gram matrix is nonsingular."""

    passed: bool
    min_eig: float
    max_eig: float
    attempts: int


def uniqueness_certificate(manifold, op, rtol=1e-10):
    images = op.apply(manifold.embed(np.eye(manifold.dim))).T  # (m, d)
    gram = np.real(images.conj().T @ images)
    eig = np.linalg.eigvalsh(gram)
    lo, hi = float(eig[0]), float(eig[-1])
    passed = hi > 0 and lo > rtol * hi
    return Certificate(bool(passed), lo, hi, 1)


@dataclass(frozen=True)
class Problem:
    x_true: np.ndarray
    y: np.ndarray
    certificate: Certificate
    op: ForwardOp


def make_problem(manifold, op, seed=0, max_attempts=10):
    """Sample x in M and y = A x, certifying that x is the only point of M with A x = y.

    ``op`` is a ForwardOp or a callable ``seed -> ForwardOp``; in the latter case
    a new operator (e.g. a new mask) is drawn after each failed certification.
    """
    factory = op if callable(op) and not isinstance(op, ForwardOp) else None
    cert = None
    for attempt in range(1, max_attempts + 1):
        current = factory(seed + attempt - 1) if factory else op
        cert = uniqueness_certificate(manifold, current)
        if cert.passed:
            cert = Certificate(True, cert.min_eig, cert.max_eig, attempt)
            x = manifold.sample(1, seed=seed)[0]
            return Problem(x, current.apply(x), cert, current)
        if factory is None:
            break
    raise ConfigError(
        f"forward operator is not injective on the manifold span (smallest Gram eigenvalue "
        f"{cert.min_eig:.3g}); use a larger sampling mask"
    )
