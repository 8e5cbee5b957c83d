"""Terminated learned PGD with a discrepancy-type stopping rule.

Iteration stops at the first step k with

    ||A x_k - y_delta||^2 + f(x_k) - f_star <= tau^2 delta^2.

When the trained layers are used up, further steps reuse the last module
(an extrapolation; the trained network only defines K steps).

``f_star`` is either a number or ``"solution-set"``, in which case it is the
minimum of f over {x : A x = y_delta}, estimated per measurement.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError, StateError
from .linops import add_noise
from .signals import as_signal, norm
from .unfolded import IterateTrace, TraceEntry, gradient_step, prox_refine


SOLUTION_SET = "solution-set"


def theory_tau(eta):
    """Smallest admissible tau (exclusive) for step size eta."""
    return max(3.0 / (2.0 - eta), eta / 2.0)


@dataclass(frozen=True)
class StopRule:
    tau: float
    delta: float
    f_star: float | str = 0.0
    strict_eta: float | None = None  # set to check tau against the theory bound
    f_star_steps: int = 500

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if self.delta < 0:
            raise InputError("delta must be >= 0")
        if self.f_star != SOLUTION_SET and not (isinstance(self.f_star, (int, float)) and self.f_star >= 0):
            raise InputError(f"f_star must be >= 0 or {SOLUTION_SET!r}")
        if self.strict_eta is not None and not self.tau > theory_tau(self.strict_eta):
            raise InputError(
                f"tau={self.tau} does not exceed {theory_tau(self.strict_eta):.6g} required for eta={self.strict_eta}"
            )

    @property
    def threshold(self):
        return self.tau**2 * self.delta**2

    def with_delta(self, delta):
        return StopRule(self.tau, delta, self.f_star, self.strict_eta, self.f_star_steps)

    def resolve_f_star(self, f, op, y_delta):
        if self.f_star == SOLUTION_SET:
            return solution_set_min(f, op, y_delta, self.f_star_steps)
        return float(self.f_star)


@dataclass(frozen=True)
class Refinement:
    steps: int = 20
    lr: float = 0.5


@dataclass
class ReconResult:
    x_out: np.ndarray
    k_star: int
    stopped_early: bool
    trace: IterateTrace
    criteria: np.ndarray  # criterion value at k = 0..k_star
    threshold: float
    f_star: float = 0.0


def criterion_value(op, f, x, y_delta, f_star=0.0):
    r = op.apply(x) - as_signal(y_delta, "measurement")
    fx = 0.0 if f is None else float(f.value(x))
    return norm(r) ** 2 + fx - f_star


def solution_set_min(f, op, y, steps=500, tol=1e-10):
    """min f(x) subject to A x = y, by projected gradient descent from A^dagger y.

    The gradient is projected onto the null space of A and the step decays as
    1/(1 + 0.01 s). Returns the smallest value seen, clamped at 0.
    """
    y = as_signal(y, "measurement")
    x = op.pseudo_inverse(y)
    best = float(f.value(x))
    for s in range(steps):
        g = f.grad(x)
        g = g - op.pseudo_inverse(op.apply(g))
        if norm(g) < tol:
            break
        x = x - g / (1.0 + 0.01 * s)
        best = min(best, float(f.value(x)))
    return max(best, 0.0)


def first_stop(criteria, threshold):
    """First k >= 1 with criteria[k] <= threshold, or None."""
    for k in range(1, len(criteria)):
        if criteria[k] <= threshold:
            return k
    return None


def default_max_steps(model, delta):
    # with delta = 0 the rule cannot fire generically, so only the trained layers run
    return model.K if delta == 0 else 4 * model.K


def reconstruct(model, f, op, y_delta, rule, refine=None, max_steps=None):
    """Run the stopped iteration from x_0 = A^dagger y_delta."""
    if model is None or f is None:
        raise StateError("reconstruction needs a trained model and penalty")
    y_delta = as_signal(y_delta, "measurement")
    if max_steps is None:
        max_steps = default_max_steps(model, rule.delta)
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    thr = rule.threshold
    f_star = rule.resolve_f_star(f, op, y_delta)
    x = op.pseudo_inverse(y_delta)
    trace = IterateTrace()
    crit = [criterion_value(op, f, x, y_delta, f_star)]
    trace.append(TraceEntry(0, x, None, norm(op.apply(x) - y_delta), float(f.value(x))))
    for k in range(1, max_steps + 1):
        xi = gradient_step(op, x, y_delta, model.eta)
        x = model.prox_apply(k, xi)
        if refine is not None:
            x = prox_refine(f, xi, x, refine.steps, refine.lr)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite iterate at step {k}")
        fx = float(f.value(x))
        res = norm(op.apply(x) - y_delta)
        trace.append(TraceEntry(k, x, xi, res, fx))
        crit.append(res**2 + fx - f_star)
        if crit[-1] <= thr:
            return ReconResult(x, k, True, trace, np.array(crit), thr, f_star)
    return ReconResult(x, max_steps, False, trace, np.array(crit), thr, f_star)


def criterion_trace(trace, f_star=0.0):
    """Criterion values along a recorded trace (residuals and penalties must be set)."""
    return trace.residuals**2 + trace.penalties - f_star


def delta_sweep(model, f, op, x_true, y, deltas, rule, seeds, refine=None):
    """Reconstruction error and stop step for each (delta, seed).

    ``rule`` supplies tau and f_star; its delta is replaced by each entry of
    ``deltas`` (absolute noise norms, strictly decreasing).
    """
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas):
        raise InputError("deltas must be positive")
    if any(a <= b for a, b in zip(deltas, deltas[1:])):
        raise InputError("deltas must be strictly decreasing")
    rows = []
    for d in deltas:
        for s in seeds:
            meas = add_noise(y, delta=d, seed=int(s))
            res = reconstruct(model, f, op, meas.y_delta, rule.with_delta(d), refine)
            rows.append({
                "delta": d,
                "seed": int(s),
                "error": norm(res.x_out - x_true),
                "k_star": res.k_star,
                "stopped_early": res.stopped_early,
            })
    return rows
