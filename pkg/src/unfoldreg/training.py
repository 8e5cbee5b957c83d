"""Alternating training of the unfolded network and the convex penalty.

Each outer loop takes one mini-batch and performs ``T_Theta`` Adam steps on the
network loss J1 with the penalty frozen, then ``T_phi`` Adam steps on the
penalty loss J2 with the network frozen. In ``pgdnet`` mode the network is
trained on the last-layer error only and the penalty is left untouched.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffnet import AdamState, ParamVector, Tape, adam_step, load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError, NumericalError, StateError
from .metrics import nmse
from .penalty import IcnnPenalty, sample_interpolant
from .signals import as_signal, from_channels, to_channels
from .unfolded import UnfoldedModel

DIVERGENCE_LIMIT = 1e6
MODES = ("full", "pgdnet")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 10
    eta: float = 0.25
    T_Theta: int = 2
    T_phi: int = 6
    gamma: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mu1: float = 0.5
    mu2: float = 10.0
    nu: float = 0.0
    batch_size: int = 1
    epochs: int = 1
    outer_loops: int | None = None  # default: epochs x batches per epoch
    seed: int = 0
    mode: str = "full"
    icnn_channels: tuple = (8, 16, 16)
    icnn_bias_scale: float = 1.0
    prox_channels: tuple = (16, 16)
    checkpoint_every: int = 0
    validate_every: int = 0  # outer loops; 0 means once per epoch

    def __post_init__(self):
        if not 0.0 < self.eta < 0.5:
            raise ConfigError(f"eta={self.eta} must lie in (0, 1/2)")
        for name in ("K", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("T_Theta", "T_phi", "epochs", "checkpoint_every", "validate_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.outer_loops is not None and self.outer_loops < 0:
            raise ConfigError("outer_loops must be >= 0")
        if self.gamma <= 0 or self.adam_eps <= 0:
            raise ConfigError("gamma and adam_eps must be positive")
        if self.icnn_bias_scale <= 0:
            raise ConfigError("icnn_bias_scale must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.mu1 < 0 or self.mu2 < 0 or self.nu < 0:
            raise ConfigError("mu1, mu2 and nu must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "icnn_channels", tuple(int(c) for c in self.icnn_channels))
        object.__setattr__(self, "prox_channels", tuple(int(c) for c in self.prox_channels))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def as_dict(self):
        d = asdict(self)
        d["icnn_channels"] = list(self.icnn_channels)
        d["prox_channels"] = list(self.prox_channels)
        return d

    def total_loops(self, n_samples):
        if self.outer_loops is not None:
            return self.outer_loops
        return self.epochs * math.ceil(n_samples / self.batch_size)


@dataclass
class TrainData:
    """Paired clean signals and measurements sharing one forward operator."""

    op: object
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = as_signal(self.xs, "x", allow_empty=True)
        self.ys = as_signal(self.ys, "y", allow_empty=True)
        if len(self.xs) != len(self.ys):
            raise InputError("xs and ys must have the same length")

    def __len__(self):
        return len(self.xs)

    @classmethod
    def from_signals(cls, op, xs):
        xs = as_signal(xs, "x")
        return cls(op, xs, op.apply(xs))


# -- record ------------------------------------------------------------------


@dataclass
class TrainRecord:
    K: int
    rows: list = field(default_factory=list)

    @property
    def columns(self):
        return ["t", "phase", "step", "J1", "J2", "gp_mean"] + [f"val_nmse_k{k}" for k in range(self.K + 1)]

    def add(self, t, phase, step, J1=None, J2=None, gp_mean=None):
        if self.rows and step <= self.rows[-1]["step"]:
            raise InputError("record steps must increase")
        self.rows.append({"t": t, "phase": phase, "step": step, "J1": J1, "J2": J2, "gp_mean": gp_mean})

    def attach_validation(self, curve):
        if not self.rows:
            return
        for k, v in enumerate(curve):
            self.rows[-1][f"val_nmse_k{k}"] = float(v)

    def phase_sequence(self):
        return [r["phase"] for r in self.rows]

    def write_csv(self, path, config_hash=""):
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash: {config_hash}\n")
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: _fmt(r.get(c)) for c in self.columns})

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        K = sum(1 for c in reader.fieldnames if c.startswith("val_nmse_k")) - 1
        rec = cls(K)
        for r in reader:
            row = {"t": int(r["t"]), "phase": r["phase"], "step": int(r["step"])}
            for c in reader.fieldnames[3:]:
                if r[c] != "":
                    row[c] = float(r[c])
            rec.rows.append(row)
        return rec


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- losses --------------------------------------------------------------------


def _channels(model, xs):
    xs = np.asarray(xs)
    return to_channels(xs.reshape((len(xs),) + model.shape))


def _j1_graph(model, f, op, xs, ys, cfg, tape, pv):
    xs = as_signal(xs, "x")
    ys = as_signal(ys, "y")
    n = len(xs)
    linear, offset = model.data_step_map(op)
    shift = offset(ys)
    target = _channels(model, xs)
    z = tape.const(_channels(model, op.pseudo_inverse(ys)))
    total = None
    outs = []
    for k in range(1, model.K + 1):
        xi = tape.add(tape.linear(z, linear, linear), shift)
        s = model.module_forward(tape, pv, k, xi)
        if not np.all(np.isfinite(s.value)):
            raise NumericalError(f"non-finite J1 term at layer {k}")
        if cfg.mode == "full":
            term = tape.scale(tape.sum_squares(tape.sub(s, xi)), 0.5)
            if cfg.mu1:
                term = tape.add(term, tape.scale(tape.sum_squares(tape.sub(s, target)), cfg.mu1))
            total = term if total is None else tape.add(total, term)
            outs.append(s)
        z = s
    if cfg.mode == "pgdnet":
        return tape.sum_squares(tape.sub(z, target))
    if f is not None:
        stacked = np.stack([from_channels(s.value).reshape((n,) + model.shape) for s in outs])
        flat = stacked.reshape((-1,) + model.shape)
        if hasattr(f, "values_and_grads"):
            vals, grads = f.values_and_grads(flat)
        else:
            vals, grads = f.values(flat), f.grads(flat)
        vals = vals.reshape(model.K, n)
        gch = to_channels(grads).reshape((model.K, n) + target.shape[1:])
        for k, s in enumerate(outs):
            if not np.all(np.isfinite(vals[k])):
                raise NumericalError(f"non-finite penalty in J1 at layer {k + 1}")
            total = tape.add(total, tape.sum(tape.external(s, vals[k], gch[k])))
    return total


def loss_J1_grad(model, f, op, xs, ys, cfg):
    """J1 summed over the batch and its gradient with respect to the network parameters."""
    tape = Tape()
    pv = tape.params(model.params)
    loss = _j1_graph(model, f, op, xs, ys, cfg, tape, pv)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError("non-finite J1")
    grads = ParamVector(tape.backward(loss, pv), model.params.nonneg)
    grads.check_finite("J1 gradient")
    return value, grads


def loss_J1(model, f, op, xs, ys, cfg):
    tape = Tape()
    pv = {k: tape.const(v) for k, v in model.params.items()}
    return float(_j1_graph(model, f, op, xs, ys, cfg, tape, pv).value)


def layer_outputs(model, op, ys):
    """S_k(xi_k) for k = 1..K, shape (K, N) + signal shape."""
    return model.forward_batch(op, ys)[1:]


def _interpolants(xs, outs, rng):
    K, N = outs.shape[:2]
    u = rng.uniform(size=(K, N))
    return np.stack([
        np.stack([sample_interpolant(xs[n], outs[k, n], u=u[k, n]) for n in range(N)]) for k in range(K)
    ])


def loss_J2(model, f, xs, ys, cfg, op=None, outs=None, rng=None, with_grad=False):
    """Penalty loss: mean f(real) - mean over layers of mean f(layer output)
    + mu2 * mean (||grad f(interpolant)|| - 1)^2.

    ``outs`` may carry precomputed layer outputs; otherwise they are computed
    with ``op``. Returns the value, or ``(value, grad, gp_mean)`` with
    ``with_grad`` (``gp_mean`` is the mean gradient norm at the interpolants).
    """
    xs = as_signal(xs, "x")
    if outs is None:
        if op is None:
            raise InputError("loss_J2 needs either op or precomputed outputs")
        outs = layer_outputs(model, op, ys)
    K, N = outs.shape[:2]
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    interp = _interpolants(xs, outs, rng).reshape((K * N,) + xs.shape[1:])
    flat_outs = outs.reshape((K * N,) + xs.shape[1:])
    if not with_grad:
        adv = float(np.mean(f.values(xs)) - np.mean(f.values(flat_outs)))
        gn = np.array([np.linalg.norm(np.ravel(g)) for g in f.grads(interp)])
        value = adv + cfg.mu2 * float(np.mean((gn - 1.0) ** 2))
        if not np.isfinite(value):
            raise NumericalError("non-finite J2")
        return value
    weights = np.concatenate([np.full(N, 1.0 / N), np.full(K * N, -1.0 / (K * N))])
    adv, g_adv = f.param_grad(np.concatenate([xs, flat_outs]), weights)
    gp, g_gp, gn = f.gradient_penalty(interp, return_norms=True)
    value = adv + cfg.mu2 * gp
    if not np.isfinite(value):
        raise NumericalError("non-finite J2")
    grad = ParamVector({k: g_adv[k] + cfg.mu2 * g_gp[k] for k in g_adv}, f.params.nonneg)
    grad.check_finite("J2 gradient")
    return value, grad, float(np.mean(gn))


# -- state -------------------------------------------------------------------


@dataclass
class TrainState:
    model: UnfoldedModel
    penalty: IcnnPenalty
    adam_theta: AdamState
    adam_phi: AdamState
    t: int = 0
    step: int = 0

    @classmethod
    def init(cls, cfg, shape):
        model = UnfoldedModel.init(shape, cfg.K, cfg.eta, cfg.prox_channels, seed=cfg.seed)
        f = IcnnPenalty.init(shape, cfg.icnn_channels, nu=cfg.nu, seed=cfg.seed + 1,
                             bias_scale=cfg.icnn_bias_scale)
        return cls(
            model, f,
            AdamState.init(model.params, cfg.gamma, cfg.beta1, cfg.beta2, cfg.adam_eps),
            AdamState.init(f.params, cfg.gamma, cfg.beta1, cfg.beta2, cfg.adam_eps),
        )

    def save(self, path):
        """One checkpoint holding both networks and both optimizer states."""
        groups, nonneg = {}, []
        for prefix, pv in (
            ("theta", self.model.params), ("phi", self.penalty.params),
            ("adam_theta/m", self.adam_theta.m), ("adam_theta/v", self.adam_theta.v),
            ("adam_phi/m", self.adam_phi.m), ("adam_phi/v", self.adam_phi.v),
        ):
            for k, v in pv.items():
                groups[f"{prefix}/{k}"] = v
            if prefix == "phi":
                nonneg += [f"phi/{k}" for k in pv.nonneg]
        meta = {
            "kind": "train-state", "t": self.t, "step": self.step,
            "adam_theta_t": self.adam_theta.t, "adam_phi_t": self.adam_phi.t,
            "K": self.model.K, "eta": self.model.eta, "shape": list(self.model.shape),
        }
        return save_checkpoint(path, ParamVector(groups, nonneg), meta)

    @classmethod
    def load(cls, path, cfg):
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "train-state":
            raise StateError(f"{path} is not a training-state checkpoint")
        fresh = cls.init(cfg, tuple(meta["shape"]))

        def take(prefix, template):
            try:
                groups = {k: params[f"{prefix}/{k}"] for k in template}
            except KeyError as exc:
                raise StateError(f"{path}: missing group {exc}") from None
            return ParamVector(groups, template.nonneg)

        theta = take("theta", fresh.model.params)
        phi = take("phi", fresh.penalty.params)
        a_t = AdamState(take("adam_theta/m", theta), take("adam_theta/v", theta), int(meta["adam_theta_t"]),
                        cfg.gamma, cfg.beta1, cfg.beta2, cfg.adam_eps)
        a_p = AdamState(take("adam_phi/m", phi), take("adam_phi/v", phi), int(meta["adam_phi_t"]),
                        cfg.gamma, cfg.beta1, cfg.beta2, cfg.adam_eps)
        return cls(fresh.model.with_params(theta), fresh.penalty.with_params(phi), a_t, a_p,
                   int(meta["t"]), int(meta["step"]))


# -- driver --------------------------------------------------------------------


def _batches(cfg, n, epoch):
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def validation_curve(model, data):
    """Mean NMSE of x_k against x for k = 0..K."""
    traj = model.forward_batch(data.op, data.ys)
    return np.array([np.mean([nmse(traj[k, n], data.xs[n]) for n in range(len(data))])
                     for k in range(len(traj))])


def train(cfg, data, val=None, state=None, record=None, checkpoint=None, log=None):
    """Run the alternating optimization.

    ``state``/``record`` resume an earlier run. ``checkpoint(state, record)`` is
    called every ``cfg.checkpoint_every`` outer loops and ``log(msg)`` at phase
    boundaries. Returns ``(model, penalty, record)``; the final state is
    available as ``record.state``.
    """
    if len(data) == 0:
        raise InputError("training set is empty")
    shape = tuple(as_signal(data.xs[0]).shape)
    if len(shape) == 1:
        shape = (1, shape[0])
    if state is None:
        state = TrainState.init(cfg, shape)
    if record is None:
        record = TrainRecord(cfg.K)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.total_loops(len(data))
    val_every = cfg.validate_every or per_epoch

    def abort(msg):
        record.state = state
        raise NumericalError(msg)

    while state.t < total:
        t = state.t
        epoch, pos = divmod(t, per_epoch)
        idx = _batches(cfg, len(data), epoch)[pos]
        xs, ys = data.xs[idx], data.ys[idx]

        if log:
            log(f"t={t} phase=theta")
        for _ in range(cfg.T_Theta):
            try:
                j1, grad = loss_J1_grad(state.model, state.penalty, data.op, xs, ys, cfg)
            except NumericalError as exc:
                abort(f"outer loop {t}: {exc}")
            if j1 > DIVERGENCE_LIMIT:
                abort(f"outer loop {t}: J1={j1:.3g} exceeds {DIVERGENCE_LIMIT:g}")
            state.adam_theta, params = adam_step(state.adam_theta, state.model.params, grad)
            state.model = state.model.with_params(params)
            state.step += 1
            record.add(t, "theta", state.step, J1=j1)

        if cfg.mode == "full" and cfg.T_phi:
            if log:
                log(f"t={t} phase=phi")
            outs = layer_outputs(state.model, data.op, ys)
            for s in range(cfg.T_phi):
                rng = np.random.default_rng([cfg.seed, t, s, 2])
                try:
                    j2, grad, gp_mean = loss_J2(state.model, state.penalty, xs, ys, cfg,
                                                outs=outs, rng=rng, with_grad=True)
                except NumericalError as exc:
                    abort(f"outer loop {t}: {exc}")
                if abs(j2) > DIVERGENCE_LIMIT:
                    abort(f"outer loop {t}: J2={j2:.3g} exceeds {DIVERGENCE_LIMIT:g}")
                state.adam_phi, params = adam_step(state.adam_phi, state.penalty.params, grad)
                if any(np.any(params[k] < 0) for k in params.nonneg):
                    raise StateError("non-negativity lost after a penalty step")
                state.penalty = state.penalty.with_params(params)
                state.step += 1
                record.add(t, "phi", state.step, J2=j2, gp_mean=gp_mean)

        state.t += 1
        if val is not None and len(val) and state.t % val_every == 0:
            record.attach_validation(validation_curve(state.model, val))
        if checkpoint and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            checkpoint(state, record)

    record.state = state
    return state.model, state.penalty, record
