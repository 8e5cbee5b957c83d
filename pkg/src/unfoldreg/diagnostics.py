"""Theory diagnostics: penalty vs. manifold distance, per-step descent audit,
stopping statistics, noise sweeps and per-layer convergence curves."""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError
from .inference import StopRule, criterion_trace, first_stop, theory_tau
from .linops import add_noise
from .metrics import nmse
from .penalty import Penalty
from .signals import norm
from .training import validation_curve
from .unfolded import prox_gap_batch

VIOLATION_TOL = 1e-6


@dataclass
class CurveSeries:
    label: str
    ks: list
    values: list

    def __post_init__(self):
        if len(self.ks) != len(self.values):
            raise InputError("ks and values differ in length")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise InputError("curve steps must be strictly increasing")

    def __getitem__(self, k):
        return self.values[self.ks.index(k)]

    @classmethod
    def from_values(cls, label, values):
        return cls(label, list(range(len(values))), [float(v) for v in values])


def write_curves_csv(path, curves, config_hash=""):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "k", "value"])
        for c in curves:
            for k, v in zip(c.ks, c.values):
                w.writerow([c.label, k, repr(float(v))])


class DistancePenalty(Penalty):
    """d_M itself, used as an oracle penalty."""

    def __init__(self, manifold):
        self.manifold = manifold

    def values(self, xs):
        return np.atleast_1d(self.manifold.distance(np.asarray(xs)))

    def grads(self, xs):
        xs = np.asarray(xs, dtype=np.complex128)
        diff = xs - self.manifold.project(xs)
        d = np.atleast_1d(self.manifold.distance(xs))
        scale = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)
        return diff * scale.reshape((-1,) + (1,) * (xs.ndim - 1))


# -- penalty vs distance -------------------------------------------------------


@dataclass
class Theorem1Report:
    n_probes: int
    spearman: float
    pearson: float
    affine_slope: float
    affine_intercept: float
    affine_residual: float  # RMS residual of the affine fit divided by std(f)
    mean_f_on_manifold: float
    f_percentile20: float
    degenerate: bool

    def as_dict(self):
        return asdict(self)


def check_theorem1(f, manifold, probes, manifold_samples=None):
    """Compare f with the distance to the manifold over a set of probes.

    The 20th percentile is taken over the probes together with the manifold
    samples. A constant f or constant distance is reported as degenerate.
    """
    probes = np.asarray(probes)
    if len(probes) == 0:
        raise InputError("no probes given")
    fv = np.asarray(f.values(probes), dtype=np.float64)
    dv = np.atleast_1d(manifold.distance(probes)).astype(np.float64)
    if manifold_samples is None:
        on = probes[dv <= 1e-10]
    else:
        on = np.asarray(manifold_samples)
    f_on = np.asarray(f.values(on), dtype=np.float64) if len(on) else np.array([np.nan])
    pool = np.concatenate([fv, f_on]) if manifold_samples is not None else fv
    p20 = float(np.percentile(pool, 20))
    mean_on = float(np.mean(f_on))
    if np.ptp(fv) == 0 or np.ptp(dv) == 0:
        return Theorem1Report(len(probes), float("nan"), float("nan"), float("nan"), float("nan"),
                              float("nan"), mean_on, p20, True)
    rho = float(stats.spearmanr(fv, dv).statistic)
    r = float(stats.pearsonr(fv, dv).statistic)
    fit = stats.linregress(dv, fv)
    resid = fv - (fit.slope * dv + fit.intercept)
    rel = float(np.sqrt(np.mean(resid**2)) / np.std(fv))
    return Theorem1Report(len(probes), rho, r, float(fit.slope), float(fit.intercept), rel, mean_on, p20, False)


def trajectory_probes(model, op, ys, steps=None):
    """Iterates x_0..x_{steps-1} of every trajectory, flattened to one batch."""
    steps = model.K if steps is None else steps
    traj = model.forward_batch(op, ys, steps=steps)[:steps]
    return traj.reshape((-1,) + traj.shape[2:])


# -- descent audit -------------------------------------------------------------


@dataclass
class MonotoneReport:
    lhs: np.ndarray
    rhs: np.ndarray
    eps: np.ndarray
    residuals: np.ndarray
    violations: list = field(default_factory=list)  # (k, excess)
    # slack sqrt(2 eps_k) ||x_{k+1} - x*|| that a value-suboptimal prox can add
    slack: np.ndarray | None = None

    @property
    def n_violations(self):
        return len(self.violations)

    @property
    def max_excess(self):
        return float(np.max(self.lhs - self.rhs)) if len(self.lhs) else float("-inf")

    def n_beyond_slack(self, tol=VIOLATION_TOL):
        """Violations that remain after adding the inexact-prox slack."""
        if self.slack is None:
            return self.n_violations
        return int(np.sum(self.lhs - self.rhs - self.slack > tol))


def step_gaps(f, trace, oracle_steps=2000):
    """prox_gap for every step of a trace (epsilon_k for the move to x_{k+1})."""
    xis = np.stack([e.xi for e in trace.entries[1:]])
    xs = np.stack([e.x for e in trace.entries[1:]])
    return prox_gap_batch(f, xis, xs, oracle_steps)


def check_monotone(trace, f, xstar, eps, eta, tol=VIOLATION_TOL):
    """Audit, for each k,

        1/2||x_{k+1}-x*||^2 - 1/2||x_k-x*||^2
            <= f(x*) - f(x_{k+1}) - (eta - eta^2/2)||A x_k - y||^2 + eps_k

    on a clean-data trace. Residuals are taken from the trace.

    When eps_k only bounds the prox objective gap, the step satisfies the
    inequality up to an extra sqrt(2 eps_k) ||x_{k+1} - x*||; that slack is
    stored on the report but not used for the violation list.
    """
    xs = trace.iterates
    n = len(xs) - 1
    eps = np.asarray(eps, dtype=np.float64)
    if len(eps) != n:
        raise InputError(f"need {n} epsilon values, got {len(eps)}")
    res = trace.residuals
    pen = trace.penalties
    if np.any(np.isnan(pen)):
        pen = np.array([f.value(x) for x in xs])
    f_star = float(f.value(xstar))
    err = np.array([0.5 * norm(x - xstar) ** 2 for x in xs])
    lhs = err[1:] - err[:-1]
    rhs = f_star - pen[1:] - (eta - eta**2 / 2.0) * res[:-1] ** 2 + eps
    viol = [(k, float(lhs[k] - rhs[k])) for k in range(n) if lhs[k] - rhs[k] > tol]
    slack = np.sqrt(2.0 * np.maximum(eps, 0.0)) * np.sqrt(2.0 * err[1:])
    return MonotoneReport(lhs, rhs, eps, res, viol, slack)


# -- stopping ------------------------------------------------------------------


@dataclass
class StopCase:
    seed: int
    k_star: int | None
    k_min: int
    stopped: bool
    nmse_curve: np.ndarray
    criteria: np.ndarray
    f_star: float = 0.0

    @property
    def within(self):
        return self.k_star is not None and abs(self.k_star - self.k_min) <= 3


def stopping_case(model, f, op, x_true, y, level, tau, f_star, seed, max_steps=None):
    """Run the full extended trajectory on noisy data and locate both the stop
    step and the NMSE-minimizing step. ``f_star`` may be ``"solution-set"``."""
    max_steps = 4 * model.K if max_steps is None else max_steps
    meas = add_noise(y, level=level, seed=seed)
    rule = StopRule(tau, meas.delta, f_star)
    fs = rule.resolve_f_star(f, op, meas.y_delta)
    trace = model.unfold_forward(op, meas.y_delta, f=f, steps=max_steps)
    crit = criterion_trace(trace, fs)
    k_star = first_stop(crit, rule.threshold)
    curve = np.array([nmse(x, x_true) for x in trace.iterates])
    k_min = int(np.argmin(curve))
    return StopCase(seed, k_star, k_min, k_star is not None, curve, crit, fs)


def finite_stopping(model, f, op, xs, ys, level=0.025, tau=None, f_star=0.0, seeds=range(20)):
    """One noisy reconstruction per seed; sample ``i`` uses problem ``i mod N``."""
    tau = theory_tau(model.eta) * 1.001 if tau is None else tau
    cases = []
    for i, s in enumerate(seeds):
        j = i % len(xs)
        cases.append(stopping_case(model, f, op, xs[j], ys[j], level, tau, f_star, int(s)))
    return cases


def semi_convergent(curve, k_min=None):
    """True if the curve rises after its minimum (and the minimum is interior)."""
    curve = np.asarray(curve)
    k_min = int(np.argmin(curve)) if k_min is None else k_min
    return k_min < len(curve) - 1 and bool(np.all(curve[k_min + 1:] > curve[k_min]))


# -- convergence speed -----------------------------------------------------------


def speed_compare(model_a, model_b, data, labels=("full", "pgdnet")):
    return (
        CurveSeries.from_values(labels[0], validation_curve(model_a, data)),
        CurveSeries.from_values(labels[1], validation_curve(model_b, data)),
    )


# -- noise sweep -------------------------------------------------------------------


def sweep_medians(rows):
    """Median error per delta, in the order the deltas first appear."""
    out = {}
    for r in rows:
        out.setdefault(r["delta"], []).append(r["error"])
    return [(d, float(np.median(v))) for d, v in out.items()]
