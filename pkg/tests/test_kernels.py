import os
import subprocess
import sys

import numpy as np
import pytest

from asipdyn import _kernels_py, kernels
from asipdyn import interval_maps as im

MAPS = [im.doubling(), im.tent(), im.piecewise_linear([1.5, 3.0]), im.lsv(0.25), im.lsv(0.7)]

compiled = pytest.importorskip("asipdyn._kernels", reason="compiled extension not built")


def _run(fn, m, refresh, R=64, L=500, seed=0):
    code, params = m.kernel_spec()
    rng = np.random.default_rng(seed)
    x = rng.random(R)
    states = rng.integers(0, 2 ** 63, size=R, dtype=np.uint64)
    out = np.empty((R, L))
    fn(code, np.ascontiguousarray(params, dtype=float), x, states, out, refresh)
    return out, x, states


@pytest.mark.parametrize("refresh", [False, True])
@pytest.mark.parametrize("m", MAPS, ids=lambda m: f"{m.name}")
def test_backends_bit_identical(m, refresh):
    a, xa, sa = _run(compiled.orbit_block, m, refresh)
    b, xb, sb = _run(_kernels_py.orbit_block, m, refresh)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(sa, sb)


@pytest.mark.parametrize("m", MAPS, ids=lambda m: f"{m.name}")
def test_kernel_matches_map_without_refresh(m):
    out, _, _ = _run(_kernels_py.orbit_block, m, False, R=8, L=20)
    for r in range(8):
        # the map evaluator may differ from libm pow in the last bit; 20 steps
        # of expansion by at most 2 keep that below 1e-8
        np.testing.assert_allclose(out[r], im.orbit(m, out[r, 0], 20), rtol=0, atol=1e-8)


def test_refresh_keeps_doubling_alive():
    out, _, _ = _run(kernels.orbit_block, im.doubling(), True, R=16, L=2000)
    assert np.mean(out[:, 100:] == 0.0) == 0.0
    dead, _, _ = _run(kernels.orbit_block, im.doubling(), False, R=16, L=200)
    assert np.all(dead[:, 100:] == 0.0)


def test_pure_python_switch():
    env = dict(os.environ, ASIPDYN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import asipdyn.kernels as k; print(k.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("cython", "python")
