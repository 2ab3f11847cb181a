# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

Every routine here has a numpy twin in ``_fallback.py`` with the same
signature and semantics; ``kernels.py`` picks one at import time.
"""

from libc.math cimport exp, sqrt, floor, fabs, round

import numpy as np

cdef int MAXD = 8


cdef inline void _unravel(Py_ssize_t flat, const Py_ssize_t[::1] shape,
                          Py_ssize_t* idx) noexcept nogil:
    cdef Py_ssize_t k
    cdef Py_ssize_t d = shape.shape[0]
    for k in range(d - 1, -1, -1):
        idx[k] = flat % shape[k]
        flat = flat // shape[k]


def grid_minplus(const double[::1] values, const Py_ssize_t[::1] shape,
                 const Py_ssize_t[:, ::1] offsets, const double[::1] off_d2,
                 const Py_ssize_t[::1] out_nodes, const double[::1] radius2,
                 double lam, double[::1] out_val, Py_ssize_t[::1] out_arg):
    """Nodal inf-convolution ``min_j values[j] + |x_i - x_j|^2 / (2 lam)``.

    ``offsets`` must be sorted by ``off_d2`` so the scan can stop once the
    per-node search radius is exceeded; strict comparison keeps the
    closest node among ties.
    """
    cdef Py_ssize_t d = shape.shape[0]
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef Py_ssize_t n_out = out_nodes.shape[0]
    cdef Py_ssize_t idx[8]
    cdef Py_ssize_t strides[8]
    cdef Py_ssize_t j, k, a, node, nb, q
    cdef double best, cand, r2, inv2l = 0.5 / lam
    cdef bint ok
    if d > MAXD:
        raise ValueError("dimension too large")
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    with nogil:
        for j in range(n_out):
            node = out_nodes[j]
            _unravel(node, shape, idx)
            best = values[node]
            nb = node
            r2 = radius2[j]
            for k in range(n_off):
                if off_d2[k] > r2:
                    break
                ok = True
                q = node
                for a in range(d):
                    if idx[a] + offsets[k, a] < 0 or idx[a] + offsets[k, a] >= shape[a]:
                        ok = False
                        break
                    q = q + offsets[k, a] * strides[a]
                if not ok:
                    continue
                cand = values[q] + off_d2[k] * inv2l
                if cand < best:
                    best = cand
                    nb = q
            out_val[j] = best
            out_arg[j] = nb


def grid_convolve(const double[::1] values, const Py_ssize_t[::1] shape,
                  const Py_ssize_t[:, ::1] offsets, const double[::1] weights,
                  const Py_ssize_t[::1] out_nodes, double[::1] out):
    """Weighted stencil sum at ``out_nodes``; stencil must stay in bounds."""
    cdef Py_ssize_t d = shape.shape[0]
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef Py_ssize_t n_out = out_nodes.shape[0]
    cdef Py_ssize_t strides[8]
    cdef Py_ssize_t j, k, a, node
    cdef double acc
    if d > MAXD:
        raise ValueError("dimension too large")
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    flat = np.zeros(n_off, dtype=np.intp)
    cdef Py_ssize_t[::1] fl = flat
    for k in range(n_off):
        for a in range(d):
            fl[k] += offsets[k, a] * strides[a]
    with nogil:
        for j in range(n_out):
            node = out_nodes[j]
            acc = 0.0
            for k in range(n_off):
                acc += weights[k] * values[node + fl[k]]
            out[j] = acc


cdef inline double _keys(double t) noexcept nogil:
    # cubic convolution kernel, a = -1/2
    t = fabs(t)
    if t < 1.0:
        return (1.5 * t - 2.5) * t * t + 1.0
    if t < 2.0:
        return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return 0.0


def interp_linear(const double[::1] values, const Py_ssize_t[::1] shape,
                  const double[::1] lower, const double[::1] step,
                  const double[:, ::1] pts, double[::1] out):
    """Multilinear interpolation; points are clamped into the box."""
    cdef Py_ssize_t d = shape.shape[0]
    cdef Py_ssize_t npts = pts.shape[0]
    cdef Py_ssize_t base[8]
    cdef double frac[8]
    cdef Py_ssize_t strides[8]
    cdef Py_ssize_t p, a, c, q, ncorner
    cdef double s, w, acc
    if d > MAXD:
        raise ValueError("dimension too large")
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    ncorner = 1 << d
    with nogil:
        for p in range(npts):
            for a in range(d):
                s = (pts[p, a] - lower[a]) / step[a]
                if s < 0.0:
                    s = 0.0
                if s > shape[a] - 1:
                    s = shape[a] - 1
                if fabs(s - round(s)) < 1e-9:
                    s = round(s)
                base[a] = <Py_ssize_t>floor(s)
                if base[a] > shape[a] - 2:
                    base[a] = shape[a] - 2
                if base[a] < 0:
                    base[a] = 0
                frac[a] = s - base[a]
            acc = 0.0
            for c in range(ncorner):
                w = 1.0
                q = 0
                for a in range(d):
                    if (c >> a) & 1:
                        w *= frac[a]
                        q += (base[a] + 1) * strides[a]
                    else:
                        w *= 1.0 - frac[a]
                        q += base[a] * strides[a]
                if w != 0.0:
                    acc += w * values[q]
            out[p] = acc


def interp_cubic(const double[::1] padded, const Py_ssize_t[::1] shape,
                 const double[::1] lower, const double[::1] step,
                 const double[:, ::1] pts, double[::1] out):
    """Tensor cubic convolution on a one-layer ghost-padded array.

    ``shape`` is the unpadded node count per axis.
    """
    cdef Py_ssize_t d = shape.shape[0]
    cdef Py_ssize_t npts = pts.shape[0]
    cdef Py_ssize_t base[8]
    cdef double wts[8][4]
    cdef Py_ssize_t pstrides[8]
    cdef Py_ssize_t p, a, c, q, ncorner, cc, m
    cdef double s, fr, w, acc
    if d > MAXD:
        raise ValueError("dimension too large")
    pstrides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        pstrides[a] = pstrides[a + 1] * (shape[a + 1] + 2)
    ncorner = 1
    for a in range(d):
        ncorner *= 4
    with nogil:
        for p in range(npts):
            for a in range(d):
                s = (pts[p, a] - lower[a]) / step[a]
                if s < 0.0:
                    s = 0.0
                if s > shape[a] - 1:
                    s = shape[a] - 1
                if fabs(s - round(s)) < 1e-9:
                    s = round(s)
                base[a] = <Py_ssize_t>floor(s)
                if base[a] > shape[a] - 2:
                    base[a] = shape[a] - 2
                if base[a] < 0:
                    base[a] = 0
                fr = s - base[a]
                wts[a][0] = _keys(fr + 1.0)
                wts[a][1] = _keys(fr)
                wts[a][2] = _keys(1.0 - fr)
                wts[a][3] = _keys(2.0 - fr)
            acc = 0.0
            for c in range(ncorner):
                cc = c
                w = 1.0
                q = 0
                for a in range(d):
                    m = cc & 3
                    cc = cc >> 2
                    w *= wts[a][m]
                    # padded index of node base-1+m is base+m
                    q += (base[a] + m) * pstrides[a]
                if w != 0.0:
                    acc += w * padded[q]
            out[p] = acc


cdef inline double _psi_bump(double s2) noexcept nogil:
    if s2 >= 1.0:
        return 0.0
    return exp(-1.0 / (1.0 - s2))


cdef inline double _ell_grad(const double* y, Py_ssize_t d, double alpha,
                             const double* z, double sigma, double* g) noexcept nogil:
    """Running cost of the bump benchmark and its gradient (into g)."""
    cdef double r2 = 0.0, s2 = 0.0, diff, psi, fac, coef
    cdef Py_ssize_t a
    for a in range(d):
        r2 += y[a] * y[a]
        diff = (y[a] - z[a]) / sigma
        s2 += diff * diff
    psi = _psi_bump(s2)
    fac = 1.0 + alpha * psi
    if psi > 0.0:
        coef = 0.5 * r2 * alpha * psi * (-2.0) / ((1.0 - s2) * (1.0 - s2) * sigma * sigma)
    else:
        coef = 0.0
    for a in range(d):
        g[a] = y[a] * fac + coef * (y[a] - z[a])
    return 0.5 * r2 * fac


def transcription_cost(const double[:, ::1] u, const double[::1] y0, double horizon,
                       double alpha, const double[::1] z, double sigma,
                       double beta, double[:, ::1] grad):
    """Cost and exact gradient of the piecewise-linear control transcription.

    States follow ``y' = u`` exactly; the running cost uses Simpson's rule
    with the exact interval midpoint, the control energy is integrated
    exactly and the tail is closed with ``sqrt(beta)/2 |y_N|^2``.
    """
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t d = u.shape[1]
    cdef Py_ssize_t k, a
    cdef double h = horizon / (n - 1)
    cdef double J = 0.0, lk, lm, sb = sqrt(beta)
    cdef double yk[8]
    cdef double ym[8]
    cdef double gk[8]
    cdef double gm[8]
    cdef double S[8]
    if d > MAXD:
        raise ValueError("dimension too large")
    # forward: store node and midpoint gradients of the running cost
    ga = np.empty((n, d))
    gb = np.zeros((n, d))
    cdef double[:, ::1] A = ga
    cdef double[:, ::1] Bm = gb
    with nogil:
        for a in range(d):
            yk[a] = y0[a]
        for k in range(n):
            lk = _ell_grad(yk, d, alpha, &z[0], sigma, gk)
            if k == 0 or k == n - 1:
                J += h / 6.0 * lk
                for a in range(d):
                    A[k, a] = h / 6.0 * gk[a]
            else:
                J += h / 3.0 * lk
                for a in range(d):
                    A[k, a] = h / 3.0 * gk[a]
            if k < n - 1:
                for a in range(d):
                    ym[a] = yk[a] + h / 8.0 * (3.0 * u[k, a] + u[k + 1, a])
                lm = _ell_grad(ym, d, alpha, &z[0], sigma, gm)
                J += 2.0 * h / 3.0 * lm
                for a in range(d):
                    Bm[k, a] = 2.0 * h / 3.0 * gm[a]
                    J += 0.5 * beta * h / 3.0 * (u[k, a] * u[k, a]
                                                 + u[k, a] * u[k + 1, a]
                                                 + u[k + 1, a] * u[k + 1, a])
                    yk[a] = yk[a] + 0.5 * h * (u[k, a] + u[k + 1, a])
        for a in range(d):
            J += 0.5 * sb * yk[a] * yk[a]
            A[n - 1, a] += sb * yk[a]
        # backward sweep: S = sensitivity to the increment of interval k
        for a in range(d):
            S[a] = 0.0
        for k in range(n):
            for a in range(d):
                grad[k, a] = 0.0
        for k in range(n - 2, -1, -1):
            for a in range(d):
                S[a] += A[k + 1, a]
                if k + 1 < n - 1:
                    S[a] += Bm[k + 1, a]
                grad[k, a] += 0.5 * h * S[a] + 3.0 * h / 8.0 * Bm[k, a]
                grad[k + 1, a] += 0.5 * h * S[a] + h / 8.0 * Bm[k, a]
                grad[k, a] += 0.5 * beta * h / 3.0 * (2.0 * u[k, a] + u[k + 1, a])
                grad[k + 1, a] += 0.5 * beta * h / 3.0 * (u[k, a] + 2.0 * u[k + 1, a])
    return J


def pmp_shoot(const double[::1] y0, const double[::1] u0, double horizon,
              Py_ssize_t nsteps, double alpha, const double[::1] z,
              double sigma, double beta, double[:, ::1] traj):
    """RK4 on ``y' = u, u' = grad ell / beta`` with the cost as a third block.

    ``traj`` receives ``nsteps + 1`` rows of ``[y, u, cost]``.
    """
    cdef Py_ssize_t d = y0.shape[0]
    cdef Py_ssize_t k, a, st
    cdef double dt = horizon / nsteps
    cdef double x[17]
    cdef double xs[17]
    cdef double kk[4][17]
    cdef double g[8]
    cdef double l, uu
    cdef Py_ssize_t nx = 2 * d + 1
    cdef double c1[4]
    c1[0] = 0.0
    c1[1] = 0.5
    c1[2] = 0.5
    c1[3] = 1.0
    if d > MAXD:
        raise ValueError("dimension too large")
    with nogil:
        for a in range(d):
            x[a] = y0[a]
            x[d + a] = u0[a]
        x[2 * d] = 0.0
        for a in range(nx):
            traj[0, a] = x[a]
        for k in range(nsteps):
            for st in range(4):
                for a in range(nx):
                    if st == 0:
                        xs[a] = x[a]
                    else:
                        xs[a] = x[a] + c1[st] * dt * kk[st - 1][a]
                l = _ell_grad(xs, d, alpha, &z[0], sigma, g)
                uu = 0.0
                for a in range(d):
                    kk[st][a] = xs[d + a]
                    kk[st][d + a] = g[a] / beta
                    uu += xs[d + a] * xs[d + a]
                kk[st][2 * d] = l + 0.5 * beta * uu
            for a in range(nx):
                x[a] += dt / 6.0 * (kk[0][a] + 2.0 * kk[1][a] + 2.0 * kk[2][a] + kk[3][a])
            for a in range(nx):
                traj[k + 1, a] = x[a]
