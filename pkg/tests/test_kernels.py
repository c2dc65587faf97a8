import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpc import _kernels_py, kernels

try:
    from warpc import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

needs_compiled = pytest.mark.skipif(_compiled is None, reason="compiled kernels not built")


def _case(seed, ch=2):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    src = rng.normal(size=(h, w, ch))
    x = rng.uniform(-2, w + 1, size=(h, w))
    y = rng.uniform(-2, h + 1, size=(h, w))
    # some exact integer and border coordinates
    x.flat[:: 3] = np.round(x.flat[:: 3])
    return src, x, y, rng.normal(size=(h, w, ch))


@needs_compiled
@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_backends_agree_forward(seed, ch):
    src, x, y, _ = _case(seed, ch)
    a, va = _compiled.bilinear_sample(src, x, y)
    b, vb = _kernels_py.bilinear_sample(src, x, y)
    assert np.array_equal(va, vb)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@needs_compiled
@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_backends_agree_backward(seed):
    src, x, y, g = _case(seed)
    for a, b in zip(_compiled.bilinear_sample_backward(src, x, y, g),
                    _kernels_py.bilinear_sample_backward(src, x, y, g)):
        assert np.allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", [_kernels_py] + ([_compiled] if _compiled else []))
def test_backward_is_adjoint_of_forward(impl, rng):
    src = rng.normal(size=(6, 7, 2))
    x = rng.uniform(0, 6, size=(5, 4))
    y = rng.uniform(0, 5, size=(5, 4))
    g = rng.normal(size=(5, 4, 2))
    out, _ = impl.bilinear_sample(src, x, y)
    gsrc, _, _ = impl.bilinear_sample_backward(src, x, y, g)
    # <A src, g> == <src, A^T g>
    assert np.sum(out * g) == pytest.approx(np.sum(src * gsrc), rel=1e-12)


def test_default_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if _compiled is not None and not os.environ.get("WARPC_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"


def test_env_var_forces_python_backend():
    env = dict(os.environ, WARPC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from warpc import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
