import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unfoldreg.errors import InputError
from unfoldreg.linops import (
    Convolution,
    DenseMatrix,
    MaskedDFT,
    add_noise,
    estimate_norm,
    load_mask_csv,
    make_mask,
    random_2d_mask,
    save_mask_csv,
    uniform_1d_mask,
)
from unfoldreg.signals import inner, norm

from conftest import crandn


def _operators():
    rng = np.random.default_rng(7)
    return [
        MaskedDFT(random_2d_mask((8, 8), 0.3, seed=1)),
        MaskedDFT(uniform_1d_mask((8, 8), 3)),
        MaskedDFT(np.ones(6, dtype=int)),
        Convolution(crandn(rng, (3, 3)), (8, 8)),
        DenseMatrix(crandn(rng, (5, 7))),
    ]


OPS = _operators()


def test_impulse_under_full_mask_is_constant():
    op = MaskedDFT(np.ones(4, dtype=int))
    out = op.apply(np.array([1, 0, 0, 0], dtype=complex))
    np.testing.assert_allclose(out, 0.5 * np.ones(4), atol=1e-15)


@pytest.mark.parametrize("op", OPS, ids=lambda o: o.kind)
def test_zero_maps_to_zero(op):
    assert np.all(op.apply(np.zeros(op.input_shape)) == 0)


def test_dense_diagonal_apply():
    op = DenseMatrix([[0.6, 0], [0, 0.8]])
    assert op.scale == 1.0
    np.testing.assert_allclose(op.apply(np.ones(2)), [0.6, 0.8])


def test_full_mask_adjoint_inverts(rng):
    op = MaskedDFT(np.ones((8, 8), dtype=int))
    x = crandn(rng, (8, 8))
    np.testing.assert_allclose(op.adjoint(op.apply(x)), x, atol=1e-13)
    np.testing.assert_allclose(op.pseudo_inverse(op.apply(x)), x, atol=1e-13)


def test_zero_mask_adjoint_and_pinv_vanish():
    op = MaskedDFT(np.zeros((4, 4), dtype=int))
    assert op.output_shape == (0,)
    assert np.all(op.adjoint(np.zeros(0)) == 0)
    assert np.all(op.pseudo_inverse(np.zeros(0)) == 0)
    assert op.norm_bound == 0.0


@pytest.mark.parametrize("op", OPS, ids=lambda o: o.kind)
def test_adjointness_on_random_pairs(op):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        u = crandn(rng, op.input_shape)
        v = crandn(rng, op.output_shape)
        worst = max(worst, abs(np.vdot(v, op.apply(u)) - np.vdot(op.adjoint(v), u)))
    assert worst < 1e-10


@pytest.mark.parametrize("op", OPS, ids=lambda o: o.kind)
def test_norm_bound(op):
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = crandn(rng, op.input_shape)
        assert norm(op.apply(x)) <= norm(x) * (1 + 1e-12)
    assert estimate_norm(op) <= 1.0 + 1e-12
    assert op.norm_bound <= 1.0


@pytest.mark.parametrize("op", OPS, ids=lambda o: o.kind)
def test_linearity(op):
    rng = np.random.default_rng(5)
    u, v = crandn(rng, op.input_shape), crandn(rng, op.input_shape)
    a, b = 0.7 - 0.2j, -1.3
    np.testing.assert_allclose(op.apply(a * u + b * v), a * op.apply(u) + b * op.apply(v), atol=1e-12)


def test_batched_apply_matches_loop(op16, rng):
    xs = crandn(rng, (3, 16, 16))
    batched = op16.apply(xs)
    for x, yb in zip(xs, batched):
        np.testing.assert_array_equal(op16.apply(x), yb)


def test_mask_sampling_idempotent(op16, rng):
    k = op16.spectrum(crandn(rng, (16, 16)))
    once = op16.sample(k)
    np.testing.assert_array_equal(op16.sample(once), once)


def test_masked_dft_row_orthonormal(op16, rng):
    r = crandn(rng, op16.output_shape)
    np.testing.assert_allclose(op16.apply(op16.adjoint(r)), r, atol=1e-13)


def test_dense_pinv_is_moore_penrose():
    op = DenseMatrix([[0.5, 0], [0, 0]])
    np.testing.assert_allclose(op.pseudo_inverse(np.array([1.0, 3.0])), [2.0, 0.0], atol=1e-14)


def test_dense_rescaled_when_norm_exceeds_one():
    op = DenseMatrix([[3.0, 0], [0, 1.0]])
    assert op.norm_bound < 1.0
    assert op.norm_bound == pytest.approx(1.0, rel=1e-5)


def test_convolution_pinv_inverts_on_invertible_kernel(rng):
    op = Convolution(np.array([[0, 0.1, 0], [0.1, 0.5, 0.1], [0, 0.1, 0]]), (8, 8))
    x = crandn(rng, (8, 8))
    np.testing.assert_allclose(op.pseudo_inverse(op.apply(x)), x, atol=1e-10)


@pytest.mark.parametrize("op", OPS, ids=lambda o: o.kind)
def test_shape_mismatch_is_input_error(op):
    with pytest.raises(InputError):
        op.apply(np.zeros((3, 3, 3, 3)))
    with pytest.raises(InputError):
        op.adjoint(np.zeros(op.output_shape[0] + 1))


def test_noise_zero_delta_returns_y(rng):
    y = crandn(rng, 10)
    meas = add_noise(y, delta=0.0, seed=1)
    np.testing.assert_array_equal(meas.y_delta, y)
    assert meas.delta == 0.0


@given(st.floats(1e-6, 1e3), st.integers(0, 2**31))
def test_noise_norm_exact(delta, seed):
    y = np.random.default_rng(seed).standard_normal(12) + 0j
    meas = add_noise(y, delta=delta, seed=seed)
    assert norm(meas.y_delta - y) == pytest.approx(delta, rel=1e-12)


def test_relative_noise_level():
    y = np.array([4.0 + 0j, 0, 0])
    meas = add_noise(y, level=0.025, seed=0)
    assert meas.delta == pytest.approx(0.1, rel=1e-15)
    assert norm(meas.y_delta - y) == pytest.approx(0.1, rel=1e-12)


def test_noise_is_seeded(rng):
    y = crandn(rng, 10)
    a, b = add_noise(y, delta=0.3, seed=4), add_noise(y, delta=0.3, seed=4)
    np.testing.assert_array_equal(a.y_delta, b.y_delta)
    assert not np.array_equal(a.y_delta, add_noise(y, delta=0.3, seed=5).y_delta)


def test_noise_argument_errors():
    with pytest.raises(InputError):
        add_noise(np.ones(3), delta=-1.0)
    with pytest.raises(InputError):
        add_noise(np.ones(3))
    with pytest.raises(InputError):
        add_noise(np.ones(3), delta=1.0, level=0.1)


@pytest.mark.parametrize("kind", ["uniform-1d", "uniform-2d", "random-1d", "random-2d", "full"])
def test_masks_are_binary_with_centre(kind):
    mask = make_mask(kind, (16, 16), fraction=0.25, R=4, seed=2)
    assert set(np.unique(mask)) <= {0, 1}
    assert mask[8, 8] == 1


def test_random_2d_fraction():
    mask = random_2d_mask((16, 16), 0.25, seed=0)
    assert mask.sum() == 64


def test_mask_csv_round_trip(tmp_path):
    mask = random_2d_mask((6, 5), 0.5, seed=3)
    save_mask_csv(tmp_path / "m.csv", mask)
    np.testing.assert_array_equal(load_mask_csv(tmp_path / "m.csv"), mask)
    (tmp_path / "bad.csv").write_text("0,2\n1,1\n")
    with pytest.raises(InputError):
        load_mask_csv(tmp_path / "bad.csv")


def test_inner_product_convention():
    u, v = np.array([1j, 0]), np.array([1, 1])
    assert inner(u, v) == pytest.approx(1j)
    assert norm(u) == 1.0


def test_non_binary_mask_rejected():
    with pytest.raises(InputError):
        MaskedDFT(np.array([0, 2]))
