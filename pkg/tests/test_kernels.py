import numpy as np
import pytest

from smoothfeedback import kernels
from smoothfeedback.core import BoxGrid, _pad_cubic
from smoothfeedback.regularize import _offsets_within, mollifier_stencil

try:
    CY = kernels.backend_module("cython")
except ImportError:  # pragma: no cover - extension not built
    CY = None
PY = kernels.backend_module("python")

needs_cython = pytest.mark.skipif(CY is None, reason="compiled extension not built")


def _grid(n=41):
    g = BoxGrid((-2.0, -1.5), (2.0, 2.5), (n, n + 4))
    X = g.nodes()
    return g, np.ascontiguousarray(np.sin(X[:, 0]) * X[:, 1] + np.abs(X[:, 0] - 0.3))


def _both(run):
    return run(PY), run(CY)


@needs_cython
def test_minplus_backends_agree():
    g, vals = _grid()
    lam = 0.05
    offs, d2 = _offsets_within(g.spacing, 0.6)
    nodes = np.arange(g.size, dtype=np.intp)
    r2 = np.full(g.size, 0.36)

    def run(mod):
        v, a = np.empty(g.size), np.empty(g.size, dtype=np.intp)
        mod.grid_minplus(vals, np.array(g.shape, dtype=np.intp), offs, d2, nodes, r2, lam, v, a)
        return v, a

    (vp, ap), (vc, ac) = _both(run)
    assert np.array_equal(vp, vc) and np.array_equal(ap, ac)
    assert np.all(vp <= vals)


@needs_cython
def test_convolve_backends_agree():
    g, vals = _grid()
    offs, w = mollifier_stencil(g.spacing, 0.3)
    sub = g.with_margin(0.3)
    k0 = g.node_offset(sub)
    mesh = np.meshgrid(*[np.arange(m) + k for m, k in zip(sub.shape, k0)], indexing="ij")
    nodes = np.ravel_multi_index(tuple(m.ravel() for m in mesh), g.shape).astype(np.intp)

    def run(mod):
        out = np.empty(len(nodes))
        mod.grid_convolve(vals, np.array(g.shape, dtype=np.intp), offs, w, nodes, out)
        return out

    a, b = _both(run)
    assert np.max(np.abs(a - b)) < 1e-13


@needs_cython
@pytest.mark.parametrize("order", ["linear", "cubic"])
def test_interp_backends_agree(order):
    g, vals = _grid()
    pts = np.random.default_rng(0).uniform([-2, -1.5], [2, 2.5], size=(3000, 2))
    pts = np.concatenate([pts, g.nodes()[::7]])
    data = vals if order == "linear" else np.ascontiguousarray(_pad_cubic(vals.reshape(g.shape)).ravel())

    def run(mod):
        out = np.empty(len(pts))
        fn = mod.interp_linear if order == "linear" else mod.interp_cubic
        fn(data, np.array(g.shape, dtype=np.intp), np.array(g.lower), g.spacing, pts, out)
        return out

    a, b = _both(run)
    assert np.max(np.abs(a - b)) < 1e-13


@needs_cython
def test_transcription_backends_agree():
    u = np.ascontiguousarray(np.random.default_rng(1).normal(size=(60, 2)))
    y0, z = np.array([-4.0, 0.4]), np.array([-2.0, 0.0])

    def run(mod):
        g = np.empty_like(u)
        c = mod.transcription_cost(u, y0, 8.0, 10.0, z, 0.5, 1.0, g)
        return c, g

    (cp, gp), (cc, gc) = _both(run)
    assert abs(cp - cc) <= 1e-12 * max(1.0, abs(cp))
    assert np.max(np.abs(gp - gc)) < 1e-10


@needs_cython
def test_transcription_gradient_matches_finite_differences():
    u = np.ascontiguousarray(np.random.default_rng(2).normal(size=(20, 2)))
    y0, z = np.array([-3.0, 0.2]), np.array([-2.0, 0.0])
    g = np.empty_like(u)
    CY.transcription_cost(u, y0, 4.0, 10.0, z, 0.5, 1.0, g)
    tmp = np.empty_like(u)
    for k in [(0, 0), (7, 1), (19, 0)]:
        up, um = u.copy(), u.copy()
        up[k] += 1e-6
        um[k] -= 1e-6
        fd = (CY.transcription_cost(up, y0, 4.0, 10.0, z, 0.5, 1.0, tmp)
              - CY.transcription_cost(um, y0, 4.0, 10.0, z, 0.5, 1.0, tmp)) / 2e-6
        assert fd == pytest.approx(g[k], rel=1e-5, abs=1e-7)


@needs_cython
def test_shoot_backends_agree():
    y0, z = np.array([-4.0, 0.4]), np.array([-2.0, 0.0])

    def run(mod):
        traj = np.empty((401, 5))
        mod.pmp_shoot(y0, np.array([1.0, -0.2]), 2.0, 400, 10.0, z, 0.5, 1.0, traj)
        return traj

    a, b = _both(run)
    assert np.max(np.abs(a - b)) < 1e-10


def test_active_backend_exposed():
    assert kernels.BACKEND in ("cython", "python")
