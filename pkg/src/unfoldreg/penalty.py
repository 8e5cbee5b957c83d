"""Convex penalties.

:class:`IcnnPenalty` is the learned input-convex network. The remaining
classes are closed-form penalties used as baselines and test oracles. Every
penalty works on complex signals, single ``(H, W)`` or batched ``(N, H, W)``,
and returns gradients packed as ``d/d(re) + 1j d/d(im)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diffnet import ParamVector, Tape, check_compatible, load_checkpoint, save_checkpoint
from .errors import InputError
from .signals import as_image, from_channels, to_channels


class Penalty:
    """Interface: ``values``/``grads`` on batches; scalar helpers built on top."""

    def values(self, xs):
        raise NotImplementedError

    def grads(self, xs):
        raise NotImplementedError

    def value(self, x):
        return float(self.values(np.asarray(x)[None])[0])

    def grad(self, x):
        return self.grads(np.asarray(x)[None])[0]

    __call__ = value


class ZeroPenalty(Penalty):
    def values(self, xs):
        return np.zeros(len(xs))

    def grads(self, xs):
        return np.zeros_like(np.asarray(xs, dtype=np.complex128))


@dataclass
class ConstantPenalty(Penalty):
    c: float

    def values(self, xs):
        return np.full(len(xs), float(self.c))

    def grads(self, xs):
        return np.zeros_like(np.asarray(xs, dtype=np.complex128))


@dataclass
class QuadraticPenalty(Penalty):
    """nu ||x||^2; its prox at xi is xi / (1 + 2 nu)."""

    nu: float

    def values(self, xs):
        xs = np.asarray(xs)
        return self.nu * np.sum(np.abs(xs.reshape(len(xs), -1)) ** 2, axis=1)

    def grads(self, xs):
        return 2.0 * self.nu * np.asarray(xs, dtype=np.complex128)

    def prox(self, xi):
        return np.asarray(xi) / (1.0 + 2.0 * self.nu)


@dataclass
class LinearPenalty(Penalty):
    """scale * Re<x, a>. Not non-negative; used for gradient-norm checks."""

    a: np.ndarray
    scale: float = 1.0

    def values(self, xs):
        xs = np.asarray(xs)
        return self.scale * np.real(np.sum(xs * np.conj(self.a), axis=tuple(range(1, xs.ndim))))

    def grads(self, xs):
        xs = np.asarray(xs)
        return np.broadcast_to(self.scale * np.asarray(self.a, dtype=np.complex128), xs.shape).copy()


# -- ICNN -------------------------------------------------------------------


def _init_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class IcnnPenalty(Penalty):
    """Input-convex CNN: z_0 = relu(Wx_0 * x + b_0),
    z_l = relu(Wz_l * z_{l-1} + Wx_l * x + b_l), f(x) = mean(z_L) + nu ||x||^2.

    ``Wz_l`` are flagged non-negative, ReLU is convex and non-decreasing, and the
    head is an average, so f is convex and non-negative in x.

    Biases enter as ``bias_scale * b_l``. This equals ``s g(x / s)`` for the
    network g with raw biases, i.e. a fixed input normalisation; it lets the
    learned thresholds keep up with signals far from unit scale.
    """

    params: ParamVector
    shape: tuple
    channels: tuple = (8, 16, 16)
    nu: float = 0.0
    in_channels: int = field(default=2)
    bias_scale: float = 1.0

    @classmethod
    def init(cls, shape, channels=(8, 16, 16), kernel=3, nu=0.0, seed=0, bias_scale=1.0):
        shape = tuple(as_image(np.zeros(shape)).shape)
        rng = np.random.default_rng(seed)
        groups, nonneg = {}, []
        prev = None
        for l, c in enumerate(channels):
            if l > 0:
                fan = prev * kernel * kernel
                groups[f"Wz{l}"] = np.abs(_init_uniform(rng, (c, prev, kernel, kernel), fan))
                nonneg.append(f"Wz{l}")
            groups[f"Wx{l}"] = _init_uniform(rng, (c, 2, kernel, kernel), 2 * kernel * kernel)
            groups[f"b{l}"] = np.zeros(c)
            prev = c
        if not bias_scale > 0:
            raise InputError("bias_scale must be positive")
        return cls(ParamVector(groups, nonneg), shape, tuple(channels), float(nu), bias_scale=float(bias_scale))

    def with_params(self, params):
        return IcnnPenalty(params, self.shape, self.channels, self.nu, bias_scale=self.bias_scale)

    @property
    def depth(self):
        return len(self.channels)

    def _batch(self, xs):
        xs = np.asarray(xs)
        if xs.shape[1:] != self.shape and xs.shape[1:] == self.shape[1:] and self.shape[0] == 1:
            xs = xs[:, None, :]
        if xs.shape[1:] != self.shape:
            raise InputError(f"penalty expects signals of shape {self.shape}, got {xs.shape[1:]}")
        return xs

    # tape form ----------------------------------------------------------------

    def forward(self, tape, pvars, x):
        """Per-sample values (N,) for a channel batch Var ``x`` of shape (N, 2, H, W)."""
        z = None
        for l in range(self.depth):
            a = tape.conv2d(x, pvars[f"Wx{l}"])
            if l > 0:
                a = tape.add(tape.conv2d(z, pvars[f"Wz{l}"]), a)
            b = pvars[f"b{l}"]
            if self.bias_scale != 1.0:
                b = tape.scale(b, self.bias_scale)
            z = tape.relu(tape.bias(a, b))
        out = tape.mean(z, axis=(1, 2, 3))
        if self.nu:
            out = tape.add(out, tape.scale(tape.sum_squares(x, axis=(1, 2, 3)), self.nu))
        return out

    # plain NumPy form -----------------------------------------------------------

    def _activations(self, X):
        """Forward pass on channel batch X; returns post-ReLU activations and masks."""
        p = self.params
        zs, masks = [], []
        z = None
        for l in range(self.depth):
            a = kernels.conv2d(X, p[f"Wx{l}"])
            if l > 0:
                a += kernels.conv2d(z, p[f"Wz{l}"])
            a += self.bias_scale * p[f"b{l}"][None, :, None, None]
            m = a > 0
            z = np.where(m, a, 0.0)
            zs.append(z)
            masks.append(m)
        return zs, masks

    def _input_grad_channels(self, X, masks):
        """Return (per-layer deltas, input gradient) for channel batch X."""
        p = self.params
        L = self.depth
        count = masks[-1][0].size
        deltas = [None] * L
        deltas[L - 1] = masks[L - 1] / count
        for l in range(L - 1, 0, -1):
            deltas[l - 1] = masks[l - 1] * kernels.conv2d_grad_input(
                np.ascontiguousarray(deltas[l]), p[f"Wz{l}"]
            )
        g = np.zeros_like(X)
        for l in range(L):
            g += kernels.conv2d_grad_input(np.ascontiguousarray(deltas[l]), p[f"Wx{l}"])
        if self.nu:
            g += 2.0 * self.nu * X
        return deltas, g

    def values(self, xs):
        xs = self._batch(xs)
        X = to_channels(xs.reshape((len(xs),) + self.shape))
        zs, _ = self._activations(X)
        out = zs[-1].mean(axis=(1, 2, 3))
        if self.nu:
            out = out + self.nu * np.sum(X * X, axis=(1, 2, 3))
        return out

    def grads(self, xs):
        xs_in = np.asarray(xs)
        xs = self._batch(xs_in)
        X = to_channels(xs.reshape((len(xs),) + self.shape))
        _, masks = self._activations(X)
        _, g = self._input_grad_channels(X, masks)
        return from_channels(g).reshape(xs_in.shape)

    def values_and_grads(self, xs):
        xs_in = np.asarray(xs)
        xs = self._batch(xs_in)
        X = to_channels(xs.reshape((len(xs),) + self.shape))
        zs, masks = self._activations(X)
        vals = zs[-1].mean(axis=(1, 2, 3))
        if self.nu:
            vals = vals + self.nu * np.sum(X * X, axis=(1, 2, 3))
        _, g = self._input_grad_channels(X, masks)
        return vals, from_channels(g).reshape(xs_in.shape)

    def param_grad(self, xs, weights):
        """Value sum_n w_n f(x_n) and its gradient with respect to the parameters."""
        xs = self._batch(xs)
        weights = np.asarray(weights, dtype=np.float64)
        tape = Tape()
        pv = tape.params(self.params)
        X = tape.const(to_channels(xs.reshape((len(xs),) + self.shape)))
        vals = self.forward(tape, pv, X)
        out = tape.sum(tape.mul(vals, weights))
        grads = tape.backward(out, pv)
        return float(out.value), ParamVector(grads, self.params.nonneg)

    def gradient_penalty(self, xs, return_norms=False):
        """mean_n (||grad f(x_n)|| - 1)^2 and its gradient with respect to the parameters.

        With ``return_norms`` the per-sample gradient norms are returned as a
        third element.

        The ReLU masks are piecewise constant in the parameters, so the input
        gradient is multilinear in the weights and is differentiated exactly by
        a second reverse sweep through the backward recursion. Bias gradients
        are zero almost everywhere.
        """
        xs = self._batch(xs)
        N = len(xs)
        X = to_channels(xs.reshape((N,) + self.shape))
        p = self.params
        L = self.depth
        _, masks = self._activations(X)
        deltas, g = self._input_grad_channels(X, masks)
        gn = np.sqrt(np.sum(g * g, axis=(1, 2, 3)))
        value = float(np.mean((gn - 1.0) ** 2))
        coef = np.where(gn > 0, 2.0 * (gn - 1.0) / np.where(gn > 0, gn, 1.0), 0.0) / N
        u = np.ascontiguousarray(g * coef[:, None, None, None])

        out = p.zeros_like()
        kh, kw = p["Wx0"].shape[2:]
        rho = kernels.conv2d(u, p["Wx0"])
        out["Wx0"] = kernels.conv2d_grad_weight(u, np.ascontiguousarray(deltas[0]), kh, kw)
        for l in range(1, L):
            s = np.ascontiguousarray(masks[l - 1] * rho)
            d = np.ascontiguousarray(deltas[l])
            out[f"Wz{l}"] = kernels.conv2d_grad_weight(s, d, kh, kw)
            out[f"Wx{l}"] = kernels.conv2d_grad_weight(u, d, kh, kw)
            if l < L - 1:
                rho = kernels.conv2d(u, p[f"Wx{l}"]) + kernels.conv2d(s, p[f"Wz{l}"])
        if return_norms:
            return value, out, gn
        return value, out


def lipschitz_penalty(f, xhat):
    """(||grad f(xhat)|| - 1)^2."""
    g = f.grad(xhat)
    return float((np.linalg.norm(np.ravel(g)) - 1.0) ** 2)


def sample_interpolant(x_real, x_gen, rng=None, u=None):
    """u * x_real + (1 - u) * x_gen with u ~ Uniform(0, 1) unless ``u`` is given."""
    x_real = np.asarray(x_real)
    x_gen = np.asarray(x_gen)
    if x_real.shape != x_gen.shape:
        raise InputError(f"shape mismatch {x_real.shape} vs {x_gen.shape}")
    if u is None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        u = rng.uniform()
    return u * x_real + (1.0 - u) * x_gen


def save_penalty(path, f):
    meta = {
        "kind": "icnn",
        "nu": f.nu,
        "shape": list(f.shape),
        "channels": list(f.channels),
        "bias_scale": f.bias_scale,
    }
    return save_checkpoint(path, f.params, meta)


def load_penalty(path):
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "icnn":
        raise InputError(f"{path} is not a penalty checkpoint")
    f = IcnnPenalty(params, tuple(meta["shape"]), tuple(meta["channels"]), float(meta["nu"]),
                    bias_scale=float(meta.get("bias_scale", 1.0)))
    check_compatible(params, IcnnPenalty.init(f.shape, f.channels, nu=f.nu).params)
    return f
