"""Small reverse-mode differentiation engine, Adam, and checkpoints.

The tape records a closed vocabulary of array operations (convolution, bias,
ReLU / leaky ReLU / softplus, average pooling, sums and means, norms,
elementwise arithmetic, and generic linear maps such as ``A* A``). Networks
are written as plain functions of :class:`Var` objects; calling
:meth:`Tape.backward` returns gradients for every recorded leaf.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InputError, NumericalError, StateError


# -- parameters ---------------------------------------------------------------


class ParamVector:
    """Ordered named float64 parameter groups with per-group non-negativity flags."""

    def __init__(self, groups=None, nonneg=()):
        self._groups = {}
        for name, value in (groups or {}).items():
            self[name] = value
        self.nonneg = frozenset(nonneg)
        unknown = self.nonneg - set(self._groups)
        if unknown:
            raise InputError(f"non-negativity flag for unknown group(s) {sorted(unknown)}")

    def __getitem__(self, name):
        return self._groups[name]

    def __setitem__(self, name, value):
        self._groups[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._groups

    def __iter__(self):
        return iter(self._groups)

    def __len__(self):
        return len(self._groups)

    def names(self):
        return list(self._groups)

    def items(self):
        return self._groups.items()

    @property
    def size(self):
        return sum(v.size for v in self._groups.values())

    def copy(self):
        return ParamVector({k: v.copy() for k, v in self._groups.items()}, self.nonneg)

    def zeros_like(self):
        return ParamVector({k: np.zeros_like(v) for k, v in self._groups.items()}, self.nonneg)

    def map(self, fn):
        return ParamVector({k: fn(v) for k, v in self._groups.items()}, self.nonneg)

    def flatten(self):
        if not self._groups:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._groups.values()])

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise InputError(f"expected {self.size} values, got {flat.size}")
        out, pos = {}, 0
        for k, v in self._groups.items():
            out[k] = flat[pos : pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamVector(out, self.nonneg)

    def subset(self, prefix):
        """Groups whose name starts with ``prefix``."""
        keep = {k: v for k, v in self._groups.items() if k.startswith(prefix)}
        return ParamVector(keep, self.nonneg & set(keep))

    def merged(self, other):
        groups = dict(self._groups)
        for k, v in other.items():
            if k in groups:
                raise InputError(f"duplicate parameter group {k!r}")
            groups[k] = v
        return ParamVector(groups, self.nonneg | other.nonneg)

    def check_finite(self, what="parameter"):
        for k, v in self._groups.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"non-finite {what} in group {k!r}")

    def __eq__(self, other):
        if not isinstance(other, ParamVector) or self.names() != other.names():
            return False
        return self.nonneg == other.nonneg and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    def __repr__(self):
        return f"ParamVector({len(self)} groups, {self.size} values)"


def project_nonneg(params):
    """Clamp flagged groups at zero; other groups are returned untouched."""
    out = params.copy()
    for k in out.nonneg:
        np.maximum(out[k], 0.0, out=out[k])
    return out


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: ParamVector
    v: ParamVector
    t: int = 0
    gamma: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, gamma=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, gamma, beta1, beta2, eps)


def adam_step(state, params, grad):
    """One bias-corrected Adam update followed by the non-negativity projection."""
    if grad.names() != params.names():
        raise InputError("gradient groups do not match parameter groups")
    grad.check_finite("gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = {}, {}, {}
    for k in params:
        g = grad[k]
        if g.shape != params[k].shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {params[k].shape} ({k})")
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        mhat = m[k] / (1.0 - b1**t)
        vhat = v[k] / (1.0 - b2**t)
        new[k] = params[k] - state.gamma * mhat / (np.sqrt(vhat) + state.eps)
    nonneg = params.nonneg
    new_state = AdamState(
        ParamVector(m, nonneg), ParamVector(v, nonneg), t,
        state.gamma, state.beta1, state.beta2, state.eps,
    )
    return new_state, project_nonneg(ParamVector(new, nonneg))


# -- tape -------------------------------------------------------------------


class Var:
    __slots__ = ("tape", "value", "idx", "requires_grad")

    def __init__(self, tape, value, requires_grad):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.idx = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(self.tape.const(other), self)

    def __mul__(self, c):
        return self.tape.scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records operations on :class:`Var` values for one reverse sweep."""

    def __init__(self):
        self._backs = []  # (out_var, parents, backward_fn)

    def leaf(self, value, requires_grad=True):
        return Var(self, np.asarray(value, dtype=np.float64), requires_grad)

    def const(self, value):
        if isinstance(value, Var):
            return value
        return Var(self, np.asarray(value, dtype=np.float64), False)

    def params(self, params):
        """Leaves for every group of a :class:`ParamVector`."""
        return {k: self.leaf(v) for k, v in params.items()}

    def _record(self, value, parents, back):
        rg = any(p.requires_grad for p in parents)
        out = Var(self, value, rg)
        if rg:
            out.idx = len(self._backs)
            self._backs.append((out, parents, back))
        return out

    # elementwise ------------------------------------------------------------

    def add(self, a, b):
        a, b = self.const(a), self.const(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b):
        a, b = self.const(a), self.const(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def mul(self, a, b):
        a, b = self.const(a), self.const(b)
        av, bv = a.value, b.value
        return self._record(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))),
        )

    def scale(self, a, c):
        c = float(c)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def relu(self, a):
        mask = a.value > 0
        return self._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def leaky_relu(self, a, slope=0.1):
        slope_map = np.where(a.value > 0, 1.0, slope)
        return self._record(a.value * slope_map, (a,), lambda g: (g * slope_map,))

    def softplus(self, a):
        v = a.value
        out = np.logaddexp(0.0, v)
        sig = 0.5 * (1.0 + np.tanh(0.5 * v))
        return self._record(out, (a,), lambda g: (g * sig,))

    # reductions ------------------------------------------------------------

    def sum(self, a, axis=None):
        shape = a.shape
        axes = _axes(axis, len(shape))

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

        return self._record(np.sum(a.value, axis=axes), (a,), back)

    def mean(self, a, axis=None):
        shape = a.shape
        axes = _axes(axis, len(shape))
        count = int(np.prod([shape[i] for i in axes])) if axes else 1

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

        return self._record(np.mean(a.value, axis=axes), (a,), back)

    def sum_squares(self, a, axis=None):
        av = a.value
        axes = _axes(axis, av.ndim)
        return self._record(
            np.sum(av * av, axis=axes), (a,),
            lambda g: (2.0 * av * np.expand_dims(g, axes),),
        )

    def norm(self, a, axis=None):
        """Euclidean norm; the gradient at 0 is taken as 0."""
        av = a.value
        axes = _axes(axis, av.ndim)
        n = np.sqrt(np.sum(av * av, axis=axes))
        safe = np.where(n > 0, n, 1.0)

        def back(g):
            return (av * np.expand_dims(np.where(n > 0, g / safe, 0.0), axes),)

        return self._record(n, (a,), back)

    def avg_pool(self, a, k=2):
        """Non-overlapping k x k average pooling over the last two axes."""
        v = a.value
        n, c, h, w = v.shape
        if h % k or w % k:
            raise InputError(f"pooling size {k} does not divide {h}x{w}")
        out = v.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

        def back(g):
            return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

        return self._record(out, (a,), back)

    # linear layers ----------------------------------------------------------

    def conv2d(self, x, w):
        xv, wv = np.ascontiguousarray(x.value), np.ascontiguousarray(w.value)
        kh, kw = wv.shape[2], wv.shape[3]

        def back(g):
            g = np.ascontiguousarray(g)
            gx = kernels.conv2d_grad_input(g, wv) if x.requires_grad else None
            gw = kernels.conv2d_grad_weight(xv, g, kh, kw) if w.requires_grad else None
            return gx, gw

        return self._record(kernels.conv2d(xv, wv), (x, w), back)

    def bias(self, x, b):
        """Add a per-channel bias to an NCHW array."""
        return self._record(
            x.value + b.value[None, :, None, None], (x, b),
            lambda g: (g, g.sum(axis=(0, 2, 3))),
        )

    def linear(self, x, fwd, adj):
        """Apply a fixed linear map ``fwd`` whose adjoint is ``adj``."""
        return self._record(fwd(x.value), (x,), lambda g: (adj(g),))

    def external(self, x, value, grad):
        """A function evaluated off-tape: ``value`` (any shape) with Jacobian-vector
        product supplied as ``grad``, an array per output element stacked on axis 0
        (or a single array for scalar output)."""
        value = np.asarray(value, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)

        def back(g):
            g = np.asarray(g)
            if g.ndim == 0:
                return (g * grad,)
            return (g.reshape(g.shape + (1,) * (grad.ndim - g.ndim)) * grad,)

        return self._record(value, (x,), back)

    # sweep ------------------------------------------------------------------

    def backward(self, out, wrt):
        """Gradients of scalar ``out`` with respect to each Var in ``wrt``.

        ``wrt`` may be a Var, a list of Vars, or a dict of Vars; the result
        has the same structure. Unreached leaves get zero gradients.
        """
        if np.size(out.value) != 1:
            raise InputError("backward needs a scalar output")
        val = float(np.asarray(out.value))
        if not np.isfinite(val):
            raise NumericalError("non-finite loss")
        grads = {}
        if out.requires_grad:
            grads[id(out)] = np.ones_like(out.value)
            for node, parents, back in reversed(self._backs[: out.idx + 1]):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                for p, gp in zip(parents, back(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + gp
                    else:
                        grads[key] = gp

        def pick(v):
            g = grads.get(id(v))
            return np.zeros_like(v.value) if g is None else np.asarray(g, dtype=np.float64)

        if isinstance(wrt, Var):
            return pick(wrt)
        if isinstance(wrt, dict):
            return {k: pick(v) for k, v in wrt.items()}
        return [pick(v) for v in wrt]


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def grad_wrt_params(loss_builder, params):
    """Value and gradient of ``loss_builder(tape, pvars)`` with respect to ``params``.

    ``pvars`` maps group names to tape leaves. Raises NumericalError naming the
    first group whose gradient is non-finite.
    """
    tape = Tape()
    pvars = tape.params(params)
    loss = loss_builder(tape, pvars)
    value = float(np.asarray(loss.value))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss (groups: {', '.join(params.names())})")
    grads = tape.backward(loss, pvars)
    out = ParamVector(grads, params.nonneg)
    out.check_finite("gradient")
    return value, out


def grad_wrt_input(f, x):
    """Value and gradient of scalar ``f(tape, xvar)`` with respect to real array ``x``."""
    tape = Tape()
    xv = tape.leaf(np.asarray(x, dtype=np.float64))
    out = f(tape, xv)
    value = float(np.asarray(out.value))
    if not np.isfinite(value):
        raise NumericalError("non-finite function value")
    return value, tape.backward(out, xv)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_paths(path):
    """(manifest, blob) paths for a checkpoint base path; a trailing .json/.bin is ignored."""
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_checkpoint(path, params, metadata=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64).

    Returns the SHA-256 of the blob.
    """
    mpath, bpath = checkpoint_paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    groups, chunks, offset = [], [], 0
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        groups.append({
            "name": name,
            "shape": list(value.shape),
            "dtype": "float64",
            "nonneg": name in params.nonneg,
            "offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "blob": bpath.name,
        "nbytes": offset,
        "sha256": digest,
        "groups": groups,
        "metadata": metadata or {},
    }
    bpath.write_bytes(blob)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def load_checkpoint(path, expect=None):
    """Read a checkpoint; returns ``(params, metadata)``.

    If ``expect`` (a ParamVector) is given, group names, shapes and flags must match it.
    """
    mpath, _ = checkpoint_paths(path)
    if not mpath.exists():
        raise StateError(f"missing checkpoint manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise StateError(f"{mpath}: malformed manifest ({exc})") from None
    blob_path = mpath.parent / manifest["blob"]
    if not blob_path.exists():
        raise StateError(f"missing checkpoint blob {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise StateError(f"{blob_path}: expected {manifest['nbytes']} bytes, found {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise StateError(f"{blob_path}: checksum mismatch")
    groups, nonneg = {}, set()
    for g in manifest["groups"]:
        if g["dtype"] != "float64":
            raise StateError(f"unsupported dtype {g['dtype']!r} in group {g['name']!r}")
        count = int(np.prod(g["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=g["offset"])
        groups[g["name"]] = arr.reshape(g["shape"]).astype(np.float64)
        if g["nonneg"]:
            nonneg.add(g["name"])
    params = ParamVector(groups, nonneg)
    for k in nonneg:
        if np.any(params[k] < 0):
            raise StateError(f"group {k!r} is flagged non-negative but has negative entries")
    if expect is not None:
        check_compatible(params, expect)
    return params, manifest.get("metadata", {})


def check_compatible(params, expect):
    """Raise StateError unless names, shapes and flags of ``params`` match ``expect``."""
    if params.names() != expect.names():
        raise StateError("checkpoint parameter groups do not match the model")
    for k in expect:
        if params[k].shape != expect[k].shape:
            raise StateError(f"group {k!r}: shape {params[k].shape} != {expect[k].shape}")
    if params.nonneg != expect.nonneg:
        raise StateError("checkpoint non-negativity flags do not match the model")
