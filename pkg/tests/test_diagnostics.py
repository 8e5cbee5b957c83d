import numpy as np
import pytest

from unfoldreg.diagnostics import (
    CurveSeries,
    DistancePenalty,
    check_monotone,
    check_theorem1,
    finite_stopping,
    semi_convergent,
    speed_compare,
    step_gaps,
    sweep_medians,
    trajectory_probes,
    write_curves_csv,
)
from unfoldreg.errors import InputError
from unfoldreg.linops import MaskedDFT
from unfoldreg.penalty import ConstantPenalty, ZeroPenalty
from unfoldreg.training import TrainData
from unfoldreg.unfolded import TraceEntry, IterateTrace, UnfoldedModel

from conftest import crandn


def test_oracle_penalty_is_perfectly_correlated(manifold16, rng):
    probes = manifold16.sample(50, seed=1) + 3 * crandn(rng, (50, 16, 16))
    rep = check_theorem1(DistancePenalty(manifold16), manifold16, probes, manifold16.sample(20, seed=2))
    assert rep.spearman == pytest.approx(1.0) and rep.pearson == pytest.approx(1.0)
    assert rep.affine_residual < 1e-10 and rep.affine_slope == pytest.approx(1.0)
    assert rep.mean_f_on_manifold < 1e-10 and rep.mean_f_on_manifold <= rep.f_percentile20


def test_constant_penalty_is_degenerate(manifold16, rng):
    probes = crandn(rng, (10, 16, 16))
    rep = check_theorem1(ConstantPenalty(1.0), manifold16, probes)
    assert rep.degenerate and np.isnan(rep.spearman)


def test_oracle_gradient_is_unit(manifold16, rng):
    x = 20 * crandn(rng, (16, 16))
    f = DistancePenalty(manifold16)
    assert np.linalg.norm(f.grad(x)) == pytest.approx(1.0)


def test_trajectory_probe_count(op16, manifold16):
    model = UnfoldedModel.init((16, 16), K=4)
    ys = op16.apply(manifold16.sample(3, seed=0))
    assert trajectory_probes(model, op16, ys).shape == (12, 16, 16)


def test_landweber_audit_on_unitary(manifold16):
    op = MaskedDFT(np.ones((16, 16), dtype=int))
    eta = 0.25
    model = UnfoldedModel.init((16, 16), K=8, eta=eta)
    x = manifold16.sample(1, seed=4)[0]
    y = op.apply(x)
    trace = model.unfold_forward(op, y, x0=np.zeros((16, 16)), f=ZeroPenalty())
    rep = check_monotone(trace, ZeroPenalty(), x, np.zeros(8), eta)
    assert rep.n_violations == 0
    np.testing.assert_allclose(rep.residuals[1:] / rep.residuals[:-1], 1 - eta, rtol=1e-10)
    assert np.all(rep.lhs <= rep.rhs + 1e-12)


def test_audit_step_onto_solution():
    x = np.array([1.0 + 0j, 2.0])
    trace = IterateTrace()
    trace.append(TraceEntry(0, x + 1.0, None, 0.0, 0.0))
    trace.append(TraceEntry(1, x, x, 0.0, 0.0))
    rep = check_monotone(trace, ZeroPenalty(), x, [0.0], 0.25)
    assert rep.lhs[0] <= 0 and rep.n_violations == 0
    with pytest.raises(InputError):
        check_monotone(trace, ZeroPenalty(), x, [0.0, 0.0], 0.25)


def test_audit_flags_violations():
    x = np.zeros(2, dtype=complex)
    trace = IterateTrace()
    trace.append(TraceEntry(0, x, None, 0.0, 0.0))
    trace.append(TraceEntry(1, x + 1.0, x, 0.0, 0.0))
    rep = check_monotone(trace, ZeroPenalty(), x, [0.0], 0.25)
    assert rep.violations == [(0, pytest.approx(1.0))]
    assert rep.n_beyond_slack() == 1
    # an objective gap of 0.2 allows up to sqrt(0.4) * sqrt(2) extra
    rep = check_monotone(trace, ZeroPenalty(), x, [0.2], 0.25)
    assert rep.n_violations == 1 and rep.n_beyond_slack() == 0
    assert rep.slack[0] == pytest.approx(np.sqrt(0.8))


def test_step_gaps_zero_for_exact_prox(op16, rng):
    model = UnfoldedModel.init((16, 16), K=3)
    trace = model.unfold_forward(op16, crandn(rng, op16.output_shape), f=ZeroPenalty())
    np.testing.assert_array_equal(step_gaps(ZeroPenalty(), trace, 10), 0.0)


def test_identical_models_give_identical_curves(op16, manifold16):
    model = UnfoldedModel.init((16, 16), K=3)
    data = TrainData.from_signals(op16, manifold16.sample(4, seed=3))
    a, b = speed_compare(model, model, data)
    assert a.values == b.values
    zero_filled = np.mean([np.sum(np.abs(op16.pseudo_inverse(y) - x) ** 2) / np.sum(np.abs(x) ** 2)
                           for x, y in zip(data.xs, data.ys)])
    assert a[0] == pytest.approx(zero_filled)


def test_curve_series_and_csv(tmp_path):
    c = CurveSeries.from_values("m", [0.5, 0.25])
    assert c[1] == 0.25
    with pytest.raises(InputError):
        CurveSeries("bad", [0, 0], [1.0, 2.0])
    write_curves_csv(tmp_path / "c.csv", [c], "h1")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "# config_hash: h1" and lines[1] == "label,k,value" and lines[2] == "m,0,0.5"


def test_semi_convergence_detection():
    assert semi_convergent([3.0, 1.0, 2.0, 2.5])
    assert not semi_convergent([3.0, 2.0, 1.0])
    assert not semi_convergent([3.0, 1.0, 0.5, 1.5], k_min=1)


def test_finite_stopping_linear_model(op16, manifold16):
    model = UnfoldedModel.init((16, 16), K=2)
    xs = manifold16.sample(2, seed=5)
    cases = finite_stopping(model, ZeroPenalty(), op16, xs, op16.apply(xs), seeds=range(4))
    assert len(cases) == 4
    # the zero-filled start already fits the data, so the rule fires at step 1
    assert all(c.stopped and c.k_star == 1 for c in cases)


def test_sweep_medians():
    rows = [{"delta": 0.2, "error": 3.0}, {"delta": 0.2, "error": 1.0}, {"delta": 0.1, "error": 0.5}]
    assert sweep_medians(rows) == [(0.2, 2.0), (0.1, 0.5)]
