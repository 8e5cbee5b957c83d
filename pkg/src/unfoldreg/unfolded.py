"""Unfolded proximal gradient network.

Each layer takes a gradient step on the data term and then applies a learned
proximal module ``S_k``::

    xi_k = x_{k-1} - eta A*(A x_{k-1} - y)
    x_k  = S_k(xi_k) = xi_k + R_k(xi_k)

``R_k`` is a three-layer CNN on the (real, imag) channels whose last layer
starts at zero, so an untrained model is plain Landweber iteration.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffnet import ParamVector, Tape, check_compatible, load_checkpoint, save_checkpoint
from .errors import InputError, NumericalError
from .penalty import _init_uniform
from .signals import as_signal, from_channels, norm, to_channels


@dataclass
class TraceEntry:
    k: int
    x: np.ndarray
    xi: np.ndarray | None
    residual: float
    penalty: float


@dataclass
class IterateTrace:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    @property
    def iterates(self):
        return [e.x for e in self.entries]

    @property
    def residuals(self):
        return np.array([e.residual for e in self.entries])

    @property
    def penalties(self):
        return np.array([e.penalty for e in self.entries])

    def append(self, entry):
        if self.entries and entry.k <= self.entries[-1].k:
            raise InputError("trace steps must be strictly increasing")
        self.entries.append(entry)


def gradient_step(op, x, y, eta):
    """x - eta A*(A x - y)."""
    return x - eta * op.adjoint(op.apply(x) - y)


@dataclass
class UnfoldedModel:
    params: ParamVector
    K: int
    eta: float
    shape: tuple
    channels: tuple = (16, 16)
    slope: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise InputError("K must be >= 1")
        if not 0.0 < self.eta < 0.5:
            raise InputError(f"step size eta={self.eta} must lie in (0, 1/2)")

    @classmethod
    def init(cls, shape, K=10, eta=0.25, channels=(16, 16), kernel=3, slope=0.1, seed=0):
        shape = tuple(int(s) for s in shape)
        if len(shape) == 1:
            shape = (1, shape[0])
        rng = np.random.default_rng(seed)
        groups = {}
        for k in range(1, K + 1):
            prev = 2
            for i, c in enumerate(channels, start=1):
                groups[f"S_{k}/W{i}"] = _init_uniform(rng, (c, prev, kernel, kernel), prev * kernel * kernel)
                groups[f"S_{k}/b{i}"] = np.zeros(c)
                prev = c
            last = len(channels) + 1
            groups[f"S_{k}/W{last}"] = np.zeros((2, prev, kernel, kernel))
            groups[f"S_{k}/b{last}"] = np.zeros(2)
        return cls(ParamVector(groups), K, float(eta), shape, tuple(channels), slope)

    def with_params(self, params):
        return UnfoldedModel(params, self.K, self.eta, self.shape, self.channels, self.slope)

    def module_index(self, k):
        """Module used at step k (1-based); steps past K reuse the last module."""
        if k < 1:
            raise InputError("step index starts at 1")
        return min(k, self.K)

    # tape form ----------------------------------------------------------------

    def module_forward(self, tape, pvars, k, x):
        """S_k on a channel batch Var (N, 2, H, W)."""
        k = self.module_index(k)
        h = x
        n = len(self.channels) + 1
        for i in range(1, n):
            h = tape.leaky_relu(
                tape.bias(tape.conv2d(h, pvars[f"S_{k}/W{i}"]), pvars[f"S_{k}/b{i}"]), self.slope
            )
        r = tape.bias(tape.conv2d(h, pvars[f"S_{k}/W{n}"]), pvars[f"S_{k}/b{n}"])
        return tape.add(x, r)

    # plain form -----------------------------------------------------------------

    def _signal(self, x):
        x = as_signal(x)
        if x.shape == self.shape:
            return x, x.shape
        if x.ndim == 1 and (1,) + x.shape == self.shape:
            return x.reshape(self.shape), x.shape
        raise InputError(f"signal shape {x.shape} does not match model shape {self.shape}")

    def prox_apply(self, k, xi):
        """S_k(xi) for a complex signal."""
        xi, orig = self._signal(xi)
        tape = Tape()
        pv = {name: tape.const(v) for name, v in self.params.items()}
        out = self.module_forward(tape, pv, k, tape.const(to_channels(xi)))
        return from_channels(out.value)[0].reshape(orig)

    def step(self, op, k, x, y):
        """One full layer; returns (xi_k, x_k)."""
        xi = gradient_step(op, x, y, self.eta)
        return xi, self.prox_apply(k, xi)

    def data_step_map(self, op):
        """Channel-space form of xi = (I - eta A*A) x + eta A* y.

        Returns ``(linear, offset)`` where ``linear`` maps (N, 2, H, W) arrays
        and is self-adjoint, and ``offset(ys)`` gives the eta A* y term.
        """
        in_shape = op.input_shape

        def linear(z):
            x = from_channels(z).reshape((len(z),) + in_shape)
            out = x - self.eta * op.normal(x)
            return to_channels(out.reshape((len(z),) + self.shape))

        def offset(ys):
            ys = np.asarray(ys)
            return to_channels((self.eta * op.adjoint(ys)).reshape((len(ys),) + self.shape))

        return linear, offset

    def forward_batch(self, op, ys, x0s=None, steps=None):
        """Iterates for a batch of measurements, shape (steps + 1, N) + input shape."""
        steps = self.K if steps is None else int(steps)
        ys = as_signal(ys, "measurement")
        n = len(ys)
        x0s = op.pseudo_inverse(ys) if x0s is None else as_signal(x0s, "x0")
        linear, offset = self.data_step_map(op)
        shift = offset(ys)
        tape = Tape()
        pv = {name: tape.const(v) for name, v in self.params.items()}
        z = to_channels(x0s.reshape((n,) + self.shape))
        out = [x0s]
        for k in range(1, steps + 1):
            z = self.module_forward(tape, pv, k, tape.const(linear(z) + shift)).value
            if not np.all(np.isfinite(z)):
                raise NumericalError(f"non-finite iterate at layer {k}")
            out.append(from_channels(z).reshape((n,) + op.input_shape))
        return np.stack(out)

    def unfold_forward(self, op, y, x0=None, f=None, steps=None):
        """Run ``steps`` layers (default K) and record the whole trajectory."""
        steps = self.K if steps is None else int(steps)
        y = as_signal(y, "measurement")
        x = op.pseudo_inverse(y) if x0 is None else as_signal(x0, "x0")
        trace = IterateTrace()
        trace.append(TraceEntry(0, x, None, norm(op.apply(x) - y), _pen(f, x)))
        for k in range(1, steps + 1):
            xi, x = self.step(op, k, x, y)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite iterate at layer {k}")
            trace.append(TraceEntry(k, x, xi, norm(op.apply(x) - y), _pen(f, x)))
        return trace


def _pen(f, x):
    return float("nan") if f is None else float(f.value(x))


def landweber(op, y, x0, eta, steps):
    """Plain Landweber iteration; returns [x_0, ..., x_steps]."""
    xs = [np.asarray(x0, dtype=np.complex128)]
    for _ in range(steps):
        x = xs[-1]
        xs.append(x - eta * op.adjoint(op.apply(x) - y))
    return xs


# -- inexact prox ------------------------------------------------------------


def _prox_objective(f, xi, zs):
    """g(z) = 1/2 ||z - xi||^2 + f(z) and its gradient, batched over zs."""
    vals, grads = _values_and_grads(f, zs)
    diff = zs - xi
    g = 0.5 * np.sum(np.abs(diff.reshape(len(zs), -1)) ** 2, axis=1) + vals
    return g, diff + grads


def _values_and_grads(f, zs):
    if hasattr(f, "values_and_grads"):
        return f.values_and_grads(zs)
    return f.values(zs), f.grads(zs)


def prox_refine(f, xi, x_init, steps=20, lr=0.5):
    """Gradient descent on 1/2||z - xi||^2 + f(z) from ``x_init``.

    Returns the iterate with the smallest objective seen, so the result is never
    worse than ``x_init``.
    """
    if steps < 0:
        raise InputError("steps must be >= 0")
    xi = np.asarray(xi, dtype=np.complex128)
    z = np.asarray(x_init, dtype=np.complex128).copy()
    if steps == 0:
        return z
    g, grad = _prox_objective(f, xi, z[None])
    best, best_g = z.copy(), g[0]
    for _ in range(steps):
        z = z - lr * grad[0]
        g, grad = _prox_objective(f, xi, z[None])
        if not np.isfinite(g[0]):
            raise NumericalError("non-finite prox objective")
        if g[0] < best_g:
            best, best_g = z.copy(), g[0]
    return best


def prox_gap_batch(f, xis, zs, oracle_steps=2000, tol=1e-12):
    """Suboptimality g(z) - min g for a batch of (xi, z) pairs.

    The minimum is estimated by gradient descent with step 1/(1 + 0.01 s)
    started from both z and xi; the best value found is used, so the gap is a
    lower estimate of the true one. Iteration stops early once every gradient
    norm is below ``tol``.
    """
    xis = np.asarray(xis, dtype=np.complex128)
    zs = np.asarray(zs, dtype=np.complex128)
    n = len(zs)
    g_z, _ = _prox_objective(f, xis, zs)
    starts = np.concatenate([zs, xis])
    centers = np.concatenate([xis, xis])
    cur = starts.copy()
    g, grad = _prox_objective(f, centers, cur)
    best = g.copy()
    for s in range(oracle_steps):
        gnorm = np.sqrt(np.sum(np.abs(grad.reshape(len(cur), -1)) ** 2, axis=1))
        if np.all(gnorm < tol):
            break
        cur = cur - grad / (1.0 + 0.01 * s)
        g, grad = _prox_objective(f, centers, cur)
        best = np.minimum(best, g)
    g_min = np.minimum(best[:n], best[n:])
    return np.maximum(g_z - g_min, 0.0)


def prox_gap(f, xi, z, oracle_steps=2000):
    """epsilon such that z solves min 1/2||z - xi||^2 + f(z) inexactly with error epsilon."""
    return float(prox_gap_batch(f, np.asarray(xi)[None], np.asarray(z)[None], oracle_steps)[0])


# -- checkpoints -------------------------------------------------------------


def save_model(path, model):
    meta = {
        "kind": "unfolded",
        "K": model.K,
        "eta": model.eta,
        "shape": list(model.shape),
        "channels": list(model.channels),
        "slope": model.slope,
    }
    return save_checkpoint(path, model.params, meta)


def load_model(path):
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "unfolded":
        raise InputError(f"{path} is not an unfolded-model checkpoint")
    model = UnfoldedModel(
        params, int(meta["K"]), float(meta["eta"]), tuple(meta["shape"]),
        tuple(meta["channels"]), float(meta["slope"]),
    )
    template = UnfoldedModel.init(model.shape, model.K, model.eta, model.channels, slope=model.slope)
    check_compatible(params, template.params)
    return model
