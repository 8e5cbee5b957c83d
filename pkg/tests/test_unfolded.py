from pathlib import Path

import numpy as np
import pytest

from unfoldreg.errors import InputError, NumericalError
from unfoldreg.linops import DenseMatrix, MaskedDFT
from unfoldreg.penalty import QuadraticPenalty, ZeroPenalty
from unfoldreg.unfolded import (
    IterateTrace,
    TraceEntry,
    UnfoldedModel,
    gradient_step,
    landweber,
    load_model,
    prox_gap,
    prox_refine,
    save_model,
)

from conftest import crandn

GOLDEN = Path(__file__).parent / "data" / "prox_golden.npy"


def golden_case():
    model = UnfoldedModel.init((4, 4), K=1, channels=(3, 3), seed=0)
    rng = np.random.default_rng(2024)
    model = model.with_params(model.params.map(lambda w: w + 0.3 * rng.standard_normal(w.shape)))
    xi = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    return model, xi


def quadratic_prox_model(nu, slope=0.1):
    """One module whose residual is the linear map -(2nu/(1+2nu)) xi.

    Uses leaky(a) - leaky(-a) = (1 + slope) a to pass the signal through the
    hidden non-linearity unchanged.
    """
    model = UnfoldedModel.init((4, 4), K=1, channels=(4,), slope=slope)
    p = model.params.zeros_like()
    for c in range(2):
        p["S_1/W1"][c, c, 1, 1] = 1.0
        p["S_1/W1"][c + 2, c, 1, 1] = -1.0
        coef = -(2 * nu / (1 + 2 * nu)) / (1 + slope)
        p["S_1/W2"][c, c, 1, 1] = coef
        p["S_1/W2"][c, c + 2, 1, 1] = -coef
    return model.with_params(p)


def test_gradient_step_examples(op16, rng):
    x = crandn(rng, (16, 16))
    np.testing.assert_array_equal(gradient_step(op16, x, op16.apply(x), 0.25), x)
    eye = DenseMatrix(np.eye(3))
    e0 = np.array([1.0, 0, 0])
    np.testing.assert_allclose(gradient_step(eye, np.zeros(3), e0, 0.25), 0.25 * e0)
    np.testing.assert_array_equal(gradient_step(op16, x, np.zeros(op16.output_shape), 0.0), x)


def test_model_invariants():
    with pytest.raises(InputError):
        UnfoldedModel.init((4, 4), K=0)
    with pytest.raises(InputError):
        UnfoldedModel.init((4, 4), eta=0.5)
    m = UnfoldedModel.init((4, 4), K=3)
    assert {name.split("/")[0] for name in m.params} == {"S_1", "S_2", "S_3"}
    assert m.module_index(7) == 3


def test_zero_weights_identity_prox(rng):
    m = UnfoldedModel.init((8, 8), K=2)
    m = m.with_params(m.params.zeros_like())
    xi = crandn(rng, (8, 8))
    np.testing.assert_array_equal(m.prox_apply(1, xi), xi)


def test_fresh_model_is_identity(rng):
    m = UnfoldedModel.init((8, 8), K=2, seed=4)
    xi = crandn(rng, (8, 8))
    np.testing.assert_array_equal(m.prox_apply(2, xi), xi)


def test_prox_golden_output():
    model, xi = golden_case()
    out = model.prox_apply(1, xi)
    np.testing.assert_array_equal(out, np.load(GOLDEN))
    np.testing.assert_array_equal(out, golden_case()[0].prox_apply(1, xi))


@pytest.mark.parametrize("nu", [0.1, 0.5, 2.0])
def test_linear_residual_reproduces_quadratic_prox(nu, rng):
    xi = crandn(rng, (4, 4))
    out = quadratic_prox_model(nu).prox_apply(1, xi)
    np.testing.assert_allclose(out, xi / (1 + 2 * nu), atol=1e-14)
    np.testing.assert_allclose(out, QuadraticPenalty(nu).prox(xi), atol=1e-14)


def test_prox_shape_mismatch():
    with pytest.raises(InputError):
        UnfoldedModel.init((4, 4), K=1).prox_apply(1, np.zeros((5, 5)))


def test_one_step_fixed_point(op16, rng):
    m = UnfoldedModel.init((16, 16), K=1)
    x0 = crandn(rng, (16, 16))
    trace = m.unfold_forward(op16, op16.apply(x0), x0=x0)
    assert len(trace) == 2
    np.testing.assert_allclose(trace[1].x, x0, atol=1e-13)


def test_landweber_closed_form_on_unitary(manifold16):
    op = MaskedDFT(np.ones((16, 16), dtype=int))
    m = UnfoldedModel.init((16, 16), K=6, eta=0.25)
    x_true = manifold16.sample(1, seed=0)[0]
    trace = m.unfold_forward(op, op.apply(x_true), x0=np.zeros((16, 16)))
    for k, e in enumerate(trace):
        np.testing.assert_allclose(e.x, (1 - 0.75**k) * x_true, atol=1e-12)


def test_zero_modules_equal_landweber(op16, rng):
    m = UnfoldedModel.init((16, 16), K=10, seed=3)
    y = crandn(rng, op16.output_shape)
    trace = m.unfold_forward(op16, y)
    ref = landweber(op16, y, op16.pseudo_inverse(y), 0.25, 10)
    assert len(trace) == 11
    assert max(np.max(np.abs(a - b)) for a, b in zip(trace.iterates, ref)) < 1e-12


def test_forward_batch_matches_single(op16, rng):
    m = UnfoldedModel.init((16, 16), K=3, seed=1)
    m = m.with_params(m.params.map(lambda w: w + 0.05 * rng.standard_normal(w.shape)))
    ys = crandn(rng, (2,) + op16.output_shape)
    batch = m.forward_batch(op16, ys, steps=5)
    assert batch.shape == (6, 2, 16, 16)
    for n in range(2):
        trace = m.unfold_forward(op16, ys[n], steps=5)
        for k in range(6):
            np.testing.assert_allclose(batch[k, n], trace[k].x, atol=1e-12)


def test_trace_records_residual_and_penalty(op16, rng):
    m = UnfoldedModel.init((16, 16), K=2)
    y = crandn(rng, op16.output_shape)
    trace = m.unfold_forward(op16, y, f=QuadraticPenalty(1.0))
    for e in trace:
        assert e.residual == pytest.approx(np.linalg.norm(op16.apply(e.x) - y))
        assert e.penalty == pytest.approx(np.sum(np.abs(e.x) ** 2))
    assert trace[0].xi is None and trace[1].xi is not None


def test_trace_steps_strictly_increase():
    trace = IterateTrace()
    trace.append(TraceEntry(0, np.zeros(2), None, 0.0, 0.0))
    with pytest.raises(InputError):
        trace.append(TraceEntry(0, np.zeros(2), None, 0.0, 0.0))


def test_non_finite_iterate_raises(op16, rng):
    m = UnfoldedModel.init((16, 16), K=1)
    p = m.params.copy()
    p["S_1/W3"][:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalError):
        m.with_params(p).unfold_forward(op16, crandn(rng, op16.output_shape))


def test_refine_zero_steps_returns_init(rng):
    x = crandn(rng, (4, 4))
    np.testing.assert_array_equal(prox_refine(QuadraticPenalty(0.5), x, x, steps=0), x)
    with pytest.raises(InputError):
        prox_refine(QuadraticPenalty(0.5), x, x, steps=-1)


def test_refine_converges_to_quadratic_prox():
    xi = np.array([2.0, 0.0], dtype=complex)
    out = prox_refine(QuadraticPenalty(0.5), xi, xi, steps=200, lr=0.1)
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)


def test_refine_zero_penalty_returns_xi(rng):
    xi, x0 = crandn(rng, (2, 4, 4))
    np.testing.assert_allclose(prox_refine(ZeroPenalty(), xi, x0, steps=1, lr=1.0), xi, atol=1e-15)


def test_refine_never_increases_objective(rng):
    f = QuadraticPenalty(1.0)
    xi, x0 = crandn(rng, (2, 4, 4))
    g = lambda z: 0.5 * np.sum(np.abs(z - xi) ** 2) + f.value(z)  # noqa: E731
    out = prox_refine(f, xi, x0, steps=5, lr=3.0)  # divergent step size
    assert g(out) <= g(x0)


def test_prox_gap_examples(rng):
    f = QuadraticPenalty(0.5)
    xi = crandn(rng, (4, 4))
    assert prox_gap(f, xi, f.prox(xi)) <= 1e-8
    assert prox_gap(f, xi, xi + 3.0) > 0
    assert prox_gap(ZeroPenalty(), xi, xi) == 0.0


def test_model_checkpoint_round_trip(tmp_path, rng):
    model, xi = golden_case()
    save_model(tmp_path / "m", model)
    loaded = load_model(tmp_path / "m")
    assert loaded.params == model.params and loaded.K == model.K and loaded.eta == model.eta
    np.testing.assert_array_equal(loaded.prox_apply(1, xi), model.prox_apply(1, xi))
