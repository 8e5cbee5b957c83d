import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from unfoldreg import _conv_py, kernels

compiled = pytest.importorskip("unfoldreg._conv")


@pytest.mark.parametrize("n,c,o,h,w,k", [(1, 2, 8, 16, 16, 3), (3, 16, 2, 7, 5, 3), (2, 1, 1, 4, 4, 1)])
def test_backends_agree(n, c, o, h, w, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    gy = rng.standard_normal((n, o, h, w))
    np.testing.assert_allclose(compiled.conv2d(x, wt), _conv_py.conv2d(x, wt), atol=1e-12)
    np.testing.assert_allclose(compiled.conv2d_grad_input(gy, wt), _conv_py.conv2d_grad_input(gy, wt), atol=1e-12)
    np.testing.assert_allclose(
        compiled.conv2d_grad_weight(x, gy, k, k), _conv_py.conv2d_grad_weight(x, gy, k, k), atol=1e-11
    )


@pytest.mark.parametrize("impl", [_conv_py, compiled])
def test_adjoint_identities(impl):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    gy = rng.standard_normal((2, 4, 6, 5))
    lhs = np.sum(impl.conv2d(x, w) * gy)
    assert lhs == pytest.approx(np.sum(x * impl.conv2d_grad_input(gy, w)), rel=1e-12)
    assert lhs == pytest.approx(np.sum(w * impl.conv2d_grad_weight(x, gy, 3, 3)), rel=1e-12)


@pytest.mark.parametrize("impl", [_conv_py, compiled])
def test_identity_kernel(impl):
    x = np.random.default_rng(2).standard_normal((1, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(impl.conv2d(x, w), x)


@pytest.mark.parametrize("impl", [_conv_py, compiled])
def test_channel_mismatch(impl):
    with pytest.raises(ValueError):
        impl.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_env_forces_fallback():
    code = "from unfoldreg import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, UNFOLDREG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_reload_without_env_restores_compiled(monkeypatch):
    monkeypatch.delenv("UNFOLDREG_PURE_PYTHON", raising=False)
    mod = importlib.reload(kernels)
    assert mod.BACKEND == "cython"
