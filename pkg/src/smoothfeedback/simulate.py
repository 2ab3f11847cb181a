"""Closed-loop integration, cost functionals and Hamiltonians.

Trajectories are integrated in batches with a shared step: classic RK4
with a fixed step, or Dormand-Prince 5(4) with a common adaptive step.
The running cost is carried as an extra state component. Exits from the
tracked region, from the law's domain or to infinity are located by
bisection on the step fraction, re-stepping from the last accepted state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlProblem, DomainError, Region, Trajectory, ValidationError

logger = logging.getLogger(__name__)

COMPLETED = "completed"
ESCAPED = "escaped"
BLEW_UP = "blew_up"


@dataclass
class SimConfig:
    """Integration settings.

    ``blowup_radius`` should be set to ten times the diameter of the
    computational grid; ``escape`` is the region whose exit stops a run.
    """

    horizon: float
    scheme: str = "rk45"
    dt: float = 1e-2
    rtol: float = 1e-8
    atol: float = 1e-10
    escape: Optional[Region] = None
    blowup_radius: float = np.inf
    bisect_tol: float = 1e-10
    max_steps: int = 2_000_000
    record: bool = True

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon < 0:
            raise ValidationError("horizon", f"must be finite and >= 0, got {self.horizon}")
        if self.scheme not in ("rk4", "rk45"):
            raise ValidationError("scheme", f"unknown scheme {self.scheme!r}")
        if self.dt <= 0:
            raise ValidationError("dt", "must be positive")


# ---------------------------------------------------------------------------
# Hamiltonians


def hamiltonian(problem: ControlProblem, y, p, u) -> np.ndarray:
    """``H(y, p, u) = -p.(f + B u) - ell - beta/2 |u|^2``."""
    Y = np.atleast_2d(y)
    P = np.atleast_2d(p)
    U = np.atleast_2d(u)
    out = -np.sum(P * problem.velocity(Y, U), axis=1) - problem.running_cost(Y, U)
    return out[0] if np.ndim(y) == 1 else out


def optimal_control(problem: ControlProblem, y, p) -> np.ndarray:
    """Maximizer ``-B^T p / beta`` of ``H(y, p, .)``."""
    Y = np.atleast_2d(y)
    P = np.atleast_2d(p)
    out = -np.einsum("nij,ni->nj", problem.control_matrix(Y), P) / problem.beta
    return out[0] if np.ndim(y) == 1 else out


def max_hamiltonian(problem: ControlProblem, y, p) -> np.ndarray:
    """``sup_u H = -ell + |B^T p|^2 / (2 beta) - p.f``."""
    Y = np.atleast_2d(y)
    P = np.atleast_2d(p)
    BtP = np.einsum("nij,ni->nj", problem.control_matrix(Y), P)
    out = -problem.running_state_cost(Y) + np.sum(BtP * BtP, axis=1) / (2 * problem.beta) \
        - np.sum(P * problem.drift(Y), axis=1)
    return out[0] if np.ndim(y) == 1 else out


def hjb_residual(problem: ControlProblem, grad_v: Callable, points) -> np.ndarray:
    """``max_u H(y, grad v(y), u)`` at ``points``; zero for classical solutions."""
    X = np.atleast_2d(points)
    return max_hamiltonian(problem, X, grad_v(X))


def feedback_control(problem: ControlProblem, grad_v: Callable) -> Callable:
    """Feedback ``u(y) = -B(y)^T grad v(y) / beta``."""

    def law(Y):
        return optimal_control(problem, Y, grad_v(Y))

    return law


# ---------------------------------------------------------------------------
# integration engine

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


class _System:
    """Augmented right-hand side ``(y, cost, extra...)`` with invalid rows flagged as NaN."""

    def __init__(self, problem: ControlProblem, law: Callable, extra: Optional[Callable] = None,
                 n_extra: int = 0):
        self.problem = problem
        self.law = law
        self.d = problem.dim
        self.extra = extra
        self.n_extra = n_extra

    def control(self, Y):
        valid = getattr(self.law, "valid", None)
        U = np.full((len(Y), self.problem.ctrl_dim), np.nan)
        ok = np.all(np.isfinite(Y), axis=1)
        if valid is not None:
            ok &= valid(Y)
        if not ok.any():
            return U
        try:
            U[ok] = np.asarray(self.law(Y[ok]), dtype=float).reshape(int(ok.sum()), -1)
        except DomainError:
            for i in np.flatnonzero(ok):
                try:
                    U[i] = np.asarray(self.law(Y[i:i + 1]), dtype=float).reshape(-1)
                except DomainError:
                    pass
        return U

    def __call__(self, X):
        Y = X[:, : self.d]
        U = self.control(Y)
        bad = ~np.all(np.isfinite(U), axis=1)
        out = np.full_like(X, np.nan)
        good = ~bad
        if good.any():
            Yg, Ug = Y[good], U[good]
            out[good, : self.d] = self.problem.velocity(Yg, Ug)
            out[good, self.d] = self.problem.running_cost(Yg, Ug)
            if self.extra is not None:
                out[good, self.d + 1:] = np.asarray(self.extra(Yg, Ug), dtype=float).reshape(len(Yg), -1)
        return out, U


def _rk4(sys: _System, X, h):
    h = np.asarray(h).reshape(-1, 1) if np.ndim(h) else h
    k1, U = sys(X)
    k2, _ = sys(X + 0.5 * h * k1)
    k3, _ = sys(X + 0.5 * h * k2)
    k4, _ = sys(X + h * k3)
    return X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), None, U


def _dp45(sys: _System, X, h, k1=None):
    hh = np.asarray(h).reshape(-1, 1) if np.ndim(h) else h
    ks = []
    U = None
    if k1 is None:
        k1, U = sys(X)
    ks.append(k1)
    for i in range(1, 7):
        acc = X.copy()
        for j, a in enumerate(_DP_A[i]):
            if a != 0.0:
                acc = acc + hh * a * ks[j]
        k, _ = sys(acc)
        ks.append(k)
    Xn = X + hh * sum(b * k for b, k in zip(_DP_B, ks) if b != 0.0)
    err = hh * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
    return Xn, err, U


@dataclass
class BatchResult:
    """Outcome of a batch of closed-loop runs started at ``y0``."""

    y0: np.ndarray
    final: np.ndarray
    cost: np.ndarray
    status: np.ndarray
    exit_time: np.ndarray
    paths: Optional[list] = None
    diagnostics: list = field(default_factory=list)
    extra: Optional[np.ndarray] = None


def _level(cfg: SimConfig, Y) -> np.ndarray:
    lev = np.full(len(Y), -np.inf)
    if cfg.escape is not None:
        lev = np.asarray(cfg.escape.level(Y), dtype=float)
    return lev


def _classify(cfg: SimConfig, Xn, d) -> np.ndarray:
    """0 ok, 1 outside escape region / law domain, 2 blow-up."""
    Y = Xn[:, :d]
    code = np.zeros(len(Xn), dtype=int)
    finite = np.all(np.isfinite(Xn), axis=1)
    r = np.where(finite, np.linalg.norm(np.where(np.isfinite(Y), Y, 0.0), axis=1), np.inf)
    code[~finite] = 1
    code[finite & (_level(cfg, np.where(np.isfinite(Y), Y, 0.0)) > 0)] = 1
    code[finite & (r > cfg.blowup_radius)] = 2
    return code


def _bisect_exit(sys, cfg, x, t, h, d):
    """Locate the first failure inside a step from ``x`` at time ``t``."""
    step = _rk4 if cfg.scheme == "rk4" else _dp45
    lo, hi = 0.0, 1.0
    x_hi = None
    code_hi = 1
    while (hi - lo) * h > cfg.bisect_tol:
        mid = 0.5 * (lo + hi)
        xm, _, _ = step(sys, x[None, :], mid * h)
        c = _classify(cfg, xm, d)[0]
        if c == 0:
            lo = mid
        else:
            hi = mid
            x_hi = xm[0]
            code_hi = c
    x_lo = step(sys, x[None, :], lo * h)[0][0] if lo > 0 else x
    return t + hi * h, x_lo, x_hi, code_hi


def integrate_batch(problem: ControlProblem, law: Callable, Y0, cfg: SimConfig,
                    extra: Optional[Callable] = None, n_extra: int = 0) -> BatchResult:
    """Integrate many initial states under ``y' = f + B law(y)`` up to ``cfg.horizon``.

    ``extra(Y, U) -> (n, n_extra)`` adds integrands accumulated alongside the cost.
    """
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    n, d = Y0.shape
    if d != problem.dim:
        raise ValidationError("y0", f"expected dimension {problem.dim}, got {d}")
    sys = _System(problem, law, extra, n_extra if extra is not None else 0)
    X = np.concatenate([Y0, np.zeros((n, 1 + sys.n_extra))], axis=1)
    status = np.array([COMPLETED] * n, dtype=object)
    exit_time = np.full(n, np.nan)
    final = X.copy()
    active = np.ones(n, dtype=bool)
    diags = [""] * n
    paths = [[(0.0, X[i].copy(), None)] for i in range(n)] if cfg.record else None

    code0 = _classify(cfg, X, d)
    for i in np.flatnonzero(code0):
        status[i] = ESCAPED if code0[i] == 1 else BLEW_UP
        exit_time[i] = 0.0
        active[i] = False
        diags[i] = "initial state outside tracked region"

    # each row carries its own time and step size, so smooth rows are not held back by rough ones
    T = float(cfg.horizon)
    t_row = np.zeros(n)
    h0 = cfg.dt if cfg.scheme == "rk4" else min(1e-3, T) if T > 0 else 0.0
    h_row = np.full(n, h0)
    t_end = T - 1e-14 * max(1.0, T)
    active &= t_row < t_end
    steps = 0
    while active.any():
        steps += 1
        if steps > cfg.max_steps:
            raise RuntimeError("step budget exhausted")
        idx = np.flatnonzero(active)
        Xa = X[idx]
        h_use = np.minimum(h_row[idx], T - t_row[idx])
        if cfg.scheme == "rk4":
            Xn, _, U = _rk4(sys, Xa, h_use)
            accept = np.ones(len(idx), dtype=bool)
            h_next = h_row[idx]
        else:
            Xn, err, U = _dp45(sys, Xa, h_use)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(Xa), np.abs(np.where(np.isfinite(Xn), Xn, 0.0)))
            ok_rows = np.all(np.isfinite(Xn), axis=1)
            e = np.zeros(len(idx))
            with np.errstate(invalid="ignore"):
                e[ok_rows] = np.sqrt(np.mean((err[ok_rows] / scale[ok_rows]) ** 2, axis=1))
            e[~np.isfinite(e)] = 1e10
            fac = 0.9 * (1.0 / np.maximum(e, 1e-10)) ** 0.2
            accept = (e <= 1.0) | (h_use <= 1e-12)
            h_row[idx[~accept]] = h_use[~accept] * np.maximum(0.2, fac[~accept])
            h_next = h_use * np.minimum(5.0, np.maximum(0.2, fac))
        code = np.where(accept, _classify(cfg, Xn, d), 0)
        for j in np.flatnonzero(code):
            i = idx[j]
            te, x_lo, x_hi, c = _bisect_exit(sys, cfg, Xa[j], t_row[i], h_use[j], d)
            active[i] = False
            exit_time[i] = te
            if c == 2:
                status[i] = BLEW_UP
                diags[i] = "state exceeded blow-up radius or became non-finite"
            else:
                status[i] = ESCAPED
                if x_hi is not None and np.all(np.isfinite(x_hi)):
                    diags[i] = "left tracked region"
                else:
                    diags[i] = "left the domain of the feedback law"
            final[i] = x_hi if x_hi is not None and np.all(np.isfinite(x_hi)) else x_lo
            if paths is not None:
                paths[i].append((te, final[i].copy(), None))
        keep = accept & (code == 0)
        rows = idx[keep]
        X[rows] = Xn[keep]
        t_row[rows] += h_use[keep]
        h_row[rows] = h_next[keep]
        if paths is not None:
            for j in np.flatnonzero(keep):
                i = idx[j]
                paths[i][-1] = (paths[i][-1][0], paths[i][-1][1], U[j])
                paths[i].append((t_row[i], Xn[j].copy(), None))
        done = rows[t_row[rows] >= t_end]
        final[done] = X[done]
        active[done] = False
    res = BatchResult(Y0, final[:, :d], final[:, d], status, exit_time, None, diags,
                      final[:, d + 1:] if sys.n_extra else None)
    if paths is not None:
        res.paths = [_path_to_traj(problem, law, p, status[i], exit_time[i], diags[i]) for i, p in enumerate(paths)]
    return res


def _path_to_traj(problem, law, path, status, exit_time, diag) -> Trajectory:
    d = problem.dim
    t = np.array([p[0] for p in path])
    X = np.array([p[1] for p in path])
    Y = X[:, :d]
    U = np.full((len(t), problem.ctrl_dim), np.nan)
    for k, p in enumerate(path):
        if p[2] is not None:
            U[k] = p[2]
    miss = ~np.all(np.isfinite(U), axis=1)
    if miss.any():
        sysl = _System(problem, law)
        U[miss] = sysl.control(Y[miss])
    rc = np.full(len(t), np.nan)  # cost rate at recorded states
    ok = np.all(np.isfinite(U), axis=1)
    if ok.any():
        rc[ok] = problem.running_cost(Y[ok], U[ok])
    return Trajectory(t, Y, U, rc, float(X[-1, d]), str(status),
                      None if not np.isfinite(exit_time) else float(exit_time), diag,
                      extra={"cumulative_cost": X[:, d].copy()})


def trajectory_cost(traj: Trajectory, T: float) -> float:
    """Accumulated cost ``V_{u,T}`` read off a recorded trajectory.

    Exact at recorded times; linear in between (the integrand is
    accumulated by the integrator itself).
    """
    if T < 0 or T > traj.t[-1] * (1 + 1e-12) + 1e-14:
        raise ValidationError("T", f"{T} outside recorded interval [0, {traj.t[-1]}]")
    return float(np.interp(T, traj.t, traj.extra["cumulative_cost"]))


def integrate_closed_loop(problem: ControlProblem, law: Callable, y0, cfg: SimConfig) -> Trajectory:
    """Single closed-loop trajectory with its running cost."""
    res = integrate_batch(problem, law, np.atleast_2d(y0), SimConfig(**{**cfg.__dict__, "record": True}))
    return res.paths[0]


def cost_value(problem: ControlProblem, law: Callable, Y0, cfg: SimConfig) -> BatchResult:
    """Truncated costs ``V_{u,T}(y0)`` for a batch of initial states."""
    return integrate_batch(problem, law, Y0, SimConfig(**{**cfg.__dict__, "record": False}))
