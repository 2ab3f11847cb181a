"""Pure numpy versions of the compiled kernels.

Signatures and output conventions match ``_kernels.pyx`` exactly so the
two backends are interchangeable.
"""

import numpy as np


def _strides(shape):
    shape = np.asarray(shape, dtype=np.intp)
    st = np.ones(len(shape), dtype=np.intp)
    for a in range(len(shape) - 2, -1, -1):
        st[a] = st[a + 1] * shape[a + 1]
    return st


def grid_minplus(values, shape, offsets, off_d2, out_nodes, radius2, lam, out_val, out_arg):
    shape = np.asarray(shape, dtype=np.intp)
    st = _strides(shape)
    nodes = np.asarray(out_nodes, dtype=np.intp)
    idx = np.stack(np.unravel_index(nodes, tuple(shape)), axis=1)
    radius2 = np.asarray(radius2, dtype=float)
    best = values[nodes].copy()
    arg = nodes.copy()
    rmax = radius2.max() if len(radius2) else -1.0
    inv2l = 0.5 / lam
    for k in range(len(off_d2)):
        if off_d2[k] > rmax:
            break
        o = offsets[k]
        tgt = idx + o
        ok = np.all((tgt >= 0) & (tgt < shape), axis=1) & (off_d2[k] <= radius2)
        if not ok.any():
            continue
        q = nodes[ok] + int(np.dot(o, st))
        cand = values[q] + off_d2[k] * inv2l
        sel = np.flatnonzero(ok)
        better = cand < best[sel]
        best[sel[better]] = cand[better]
        arg[sel[better]] = q[better]
    out_val[:] = best
    out_arg[:] = arg


def grid_convolve(values, shape, offsets, weights, out_nodes, out):
    st = _strides(shape)
    nodes = np.asarray(out_nodes, dtype=np.intp)
    acc = np.zeros(len(nodes))
    flat = np.asarray(offsets, dtype=np.intp) @ st
    for k in range(len(weights)):
        acc += weights[k] * values[nodes + flat[k]]
    out[:] = acc


# grid coordinates this close to a node are treated as the node (exact nodal eval)
NODE_SNAP = 1e-9


def _cell(shape, lower, step, pts):
    shape = np.asarray(shape, dtype=np.intp)
    s = (np.asarray(pts) - np.asarray(lower)) / np.asarray(step)
    s = np.clip(s, 0.0, shape - 1)
    r = np.rint(s)
    s = np.where(np.abs(s - r) < NODE_SNAP, r, s)
    base = np.clip(np.floor(s).astype(np.intp), 0, shape - 2)
    return base, s - base


def interp_linear(values, shape, lower, step, pts, out):
    shape = np.asarray(shape, dtype=np.intp)
    d = len(shape)
    st = _strides(shape)
    base, frac = _cell(shape, lower, step, pts)
    acc = np.zeros(len(pts))
    for c in range(1 << d):
        bits = np.array([(c >> a) & 1 for a in range(d)])
        w = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
        q = (base + bits) @ st
        acc += w * values[q]
    out[:] = acc


def _keys(t):
    t = np.abs(t)
    return np.where(
        t < 1.0,
        (1.5 * t - 2.5) * t * t + 1.0,
        np.where(t < 2.0, ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0, 0.0),
    )


def interp_cubic(padded, shape, lower, step, pts, out):
    shape = np.asarray(shape, dtype=np.intp)
    d = len(shape)
    pst = _strides(shape + 2)
    base, frac = _cell(shape, lower, step, pts)
    wts = np.stack([_keys(frac + 1.0), _keys(frac), _keys(1.0 - frac), _keys(2.0 - frac)], axis=2)
    acc = np.zeros(len(pts))
    for c in range(4**d):
        m = np.array([(c >> (2 * a)) & 3 for a in range(d)])
        w = np.prod(wts[:, np.arange(d), m], axis=1)
        q = (base + m) @ pst
        acc += w * padded[q]
    out[:] = acc


def _ell_grad(y, alpha, z, sigma):
    """Bump running cost and gradient for an (n, d) batch."""
    r2 = np.sum(y * y, axis=1)
    dz = (y - z) / sigma
    s2 = np.sum(dz * dz, axis=1)
    inside = s2 < 1.0
    psi = np.zeros_like(s2)
    psi[inside] = np.exp(-1.0 / (1.0 - s2[inside]))
    coef = np.zeros_like(s2)
    coef[inside] = -r2[inside] * alpha * psi[inside] / ((1.0 - s2[inside]) ** 2 * sigma**2)
    g = y * (1.0 + alpha * psi)[:, None] + coef[:, None] * (y - z)
    return 0.5 * r2 * (1.0 + alpha * psi), g


def transcription_cost(u, y0, horizon, alpha, z, sigma, beta, grad):
    u = np.asarray(u)
    n = u.shape[0]
    h = horizon / (n - 1)
    z = np.asarray(z)
    inc = 0.5 * h * (u[:-1] + u[1:])
    y = np.empty_like(u)
    y[0] = y0
    y[1:] = y0 + np.cumsum(inc, axis=0)
    ym = y[:-1] + h / 8.0 * (3.0 * u[:-1] + u[1:])
    lk, gk = _ell_grad(y, alpha, z, sigma)
    lm, gm = _ell_grad(ym, alpha, z, sigma)
    wk = np.full(n, h / 3.0)
    wk[0] = wk[-1] = h / 6.0
    sb = np.sqrt(beta)
    energy = 0.5 * beta * h / 3.0 * np.sum(u[:-1] ** 2 + u[:-1] * u[1:] + u[1:] ** 2)
    J = np.dot(wk, lk) + 2.0 * h / 3.0 * np.sum(lm) + energy + 0.5 * sb * np.dot(y[-1], y[-1])
    A = wk[:, None] * gk
    A[-1] += sb * y[-1]
    Bm = np.zeros_like(u)
    Bm[:-1] = 2.0 * h / 3.0 * gm
    # S_k = sum_{i>k} (A_i + Bm_i)
    tot = A + Bm
    S = np.cumsum(tot[::-1], axis=0)[::-1]
    S = S[1:]
    g = np.zeros_like(u)
    g[:-1] += 0.5 * h * S + 3.0 * h / 8.0 * Bm[:-1]
    g[1:] += 0.5 * h * S + h / 8.0 * Bm[:-1]
    g[:-1] += 0.5 * beta * h / 3.0 * (2.0 * u[:-1] + u[1:])
    g[1:] += 0.5 * beta * h / 3.0 * (u[:-1] + 2.0 * u[1:])
    grad[:, :] = g
    return float(J)


def pmp_shoot(y0, u0, horizon, nsteps, alpha, z, sigma, beta, traj):
    d = len(y0)
    dt = horizon / nsteps
    z = np.asarray(z)

    def rhs(x):
        l, g = _ell_grad(x[None, :d], alpha, z, sigma)
        u = x[d : 2 * d]
        return np.concatenate([u, g[0] / beta, [l[0] + 0.5 * beta * np.dot(u, u)]])

    x = np.concatenate([y0, u0, [0.0]])
    traj[0] = x
    for k in range(nsteps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        traj[k + 1] = x
