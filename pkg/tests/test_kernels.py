"""The compiled kernels and their numpy twin must agree."""
import subprocess
import sys

import numpy as np
import pytest

from aeda import _kernels_py as py

ck = pytest.importorskip("aeda._ckernels")

SHAPES = [(2, 1, 20, 10, 16, 3, 3), (3, 16, 10, 5, 32, 2, 2), (2, 32, 5, 5, 32, 2, 2), (2, 32, 20, 10, 1, 3, 3),
          (1, 3, 4, 7, 2, 1, 3), (2, 2, 1, 1, 3, 3, 2)]


@pytest.mark.parametrize("n,ci,h,w,co,kh,kw", SHAPES)
def test_conv_backends_agree(n, ci, h, w, co, kh, kw):
    rng = np.random.default_rng(h * w + co)
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((co, ci, kh, kw))
    b = rng.standard_normal(co)
    g = rng.standard_normal((n, co, h, w))
    assert np.allclose(ck.conv2d_forward(x, wt, b), py.conv2d_forward(x, wt, b), rtol=0, atol=1e-11)
    for a, c in zip(ck.conv2d_backward(x, wt, g), py.conv2d_backward(x, wt, g)):
        assert np.allclose(a, c, rtol=0, atol=1e-10)


@pytest.mark.parametrize("ph,pw", [(2, 2), (2, 1), (3, 2), (1, 1)])
def test_pool_backends_agree(ph, pw):
    rng = np.random.default_rng(ph * 10 + pw)
    x = np.round(rng.standard_normal((2, 3, 7, 5)), 1)  # rounding forces ties
    yc, ic = ck.maxpool_forward(x, ph, pw)
    yp, ip = py.maxpool_forward(x, ph, pw)
    assert np.array_equal(yc, yp) and np.array_equal(np.asarray(ic), np.asarray(ip))
    g = rng.standard_normal(yc.shape)
    assert np.array_equal(ck.maxpool_backward(g, ic, x.shape), py.maxpool_backward(g, ip, x.shape))


@pytest.mark.parametrize("fh,fw", [(2, 2), (2, 1), (1, 3)])
def test_upsample_backends_agree(fh, fw):
    rng = np.random.default_rng(fh + 7 * fw)
    x = rng.standard_normal((2, 3, 4, 5))
    y = ck.upsample_forward(x, fh, fw)
    assert np.array_equal(y, py.upsample_forward(x, fh, fw))
    g = rng.standard_normal(y.shape)
    assert np.allclose(ck.upsample_backward(g, fh, fw), py.upsample_backward(g, fh, fw), rtol=0, atol=1e-12)


def test_kernels_accept_read_only_inputs():
    x = np.ones((1, 1, 4, 4))
    x.flags.writeable = False
    w = np.ones((2, 1, 3, 3))
    w.flags.writeable = False
    assert ck.conv2d_forward(x, w, np.zeros(2)).shape == (1, 2, 4, 4)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "cython")])
def test_backend_switch(flag, expected):
    code = "import aeda; print(aeda.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={"AEDA_PURE_PYTHON": flag, "PATH": ""}).stdout.strip()
    assert out == expected
