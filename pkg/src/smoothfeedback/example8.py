"""Planar bump benchmark with a non-differentiable value function.

The state obeys ``y' = u`` in the plane and the running cost is
``ell_alpha(y) = |y|^2 / 2 * (1 + alpha psi(|y - z| / sigma))``. For
``alpha = 0`` the value is ``sqrt(beta)/2 |y|^2``; a tall bump placed on
the negative first axis splits optimal paths into mirror pairs and makes
the value function non-differentiable behind it.

Open-loop optima are found by a multistart direct transcription
(piecewise-linear controls, quasi-Newton with exact adjoint gradients)
and then polished by Newton shooting on the Pontryagin system.
"""

from __future__ import annotations

import csv
import io
import logging
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import minimize

from . import kernels
from .core import BoxGrid, ControlProblem, ScalarField, ValidationError, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example8Config:
    """Benchmark parameters and solver settings."""

    alpha: float = 10.0
    beta: float = 1.0
    z: tuple = (-2.0, 0.0)
    sigma: float = 0.5
    nodes: int = 200
    horizon: float = 15.0
    lower: tuple = (-6.0, -6.0)
    upper: tuple = (6.0, 6.0)
    points: tuple = (121, 121)
    n_random: int = 8
    dedup_tol: float = 1e-3
    tie_tol: float = 1e-3
    polish_dt: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        z = tuple(float(v) for v in self.z)
        object.__setattr__(self, "z", z)
        if self.beta <= 0:
            raise ValidationError("beta", "must be positive")
        if self.sigma <= 0:
            raise ValidationError("sigma", "must be positive")
        if self.alpha < 0:
            raise ValidationError("alpha", "must be >= 0")
        if len(z) != 2 or z[1] != 0.0 or not z[0] < -self.sigma:
            raise ValidationError("z", f"need z = (z1, 0) with z1 < -sigma, got {z}")
        if self.nodes < 3:
            raise ValidationError("nodes", "need at least 3 transcription nodes")
        if self.horizon <= 0:
            raise ValidationError("horizon", "must be positive")

    @property
    def grid(self) -> BoxGrid:
        return BoxGrid(self.lower, self.upper, self.points)

    @property
    def R(self) -> float:
        """Radius outside which the bump is irrelevant for the Lyapunov setup."""
        return float(np.hypot(*self.z) + self.sigma)

    @property
    def r_free(self) -> float:
        """Radius of the bump-free ball ``|z| - sigma``."""
        return float(np.hypot(*self.z) - self.sigma)


# ---------------------------------------------------------------------------
# analytic ingredients


def psi(s) -> np.ndarray:
    """Bump profile ``exp(-1/(1-s^2))`` on ``|s| < 1``, zero elsewhere."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def ell_alpha(Y, cfg: Example8Config, alpha: Optional[float] = None) -> np.ndarray:
    a = cfg.alpha if alpha is None else alpha
    Y = np.atleast_2d(Y)
    s = np.linalg.norm(Y - np.array(cfg.z), axis=1) / cfg.sigma
    return 0.5 * np.sum(Y * Y, axis=1) * (1.0 + a * psi(s))


def grad_ell_alpha(Y, cfg: Example8Config, alpha: Optional[float] = None) -> np.ndarray:
    a = cfg.alpha if alpha is None else alpha
    from ._fallback import _ell_grad

    return _ell_grad(np.atleast_2d(np.asarray(Y, dtype=float)), a, np.array(cfg.z), cfg.sigma)[1]


def v0(Y, cfg: Example8Config) -> np.ndarray:
    """Value function of the bump-free problem."""
    Y = np.atleast_2d(Y)
    return 0.5 * np.sqrt(cfg.beta) * np.sum(Y * Y, axis=1)


def grad_v0(Y, cfg: Example8Config) -> np.ndarray:
    return np.sqrt(cfg.beta) * np.atleast_2d(Y)


def u0_law(Y, cfg: Example8Config) -> np.ndarray:
    """Optimal feedback of the bump-free problem, ``-y / sqrt(beta)``."""
    return -np.atleast_2d(Y) / np.sqrt(cfg.beta)


def v0_open_loop(y0, t, cfg: Example8Config) -> np.ndarray:
    """Optimal bump-free control ``-y0 exp(-t/sqrt(beta)) / sqrt(beta)``."""
    sb = np.sqrt(cfg.beta)
    return -np.outer(np.exp(-np.asarray(t) / sb), np.asarray(y0, dtype=float)) / sb


def linear_arc(y0, u0, t, cfg: Example8Config) -> np.ndarray:
    """Solution of ``y'' = y / beta`` with ``y(0) = y0``, ``y'(0) = u0``."""
    sb = np.sqrt(cfg.beta)
    t = np.asarray(t, dtype=float)[:, None]
    return np.cosh(t / sb) * np.asarray(y0) + u0 * sb * np.sinh(t / sb)


def problem(cfg: Example8Config, alpha: Optional[float] = None) -> ControlProblem:
    a = cfg.alpha if alpha is None else alpha
    return ControlProblem(
        f=lambda Y: np.zeros_like(Y),
        B=lambda Y: np.broadcast_to(np.eye(2), (len(Y), 2, 2)),
        ell=lambda Y: ell_alpha(Y, cfg, a),
        beta=cfg.beta,
        dim=2,
        ctrl_dim=2,
        name=f"bump(alpha={a:g})",
    )


def lyapunov_w(Y, cfg: Example8Config) -> np.ndarray:
    """``w = (|y|^2 - R^2)^2`` outside ``B(0, R)``, zero inside."""
    r2 = np.sum(np.atleast_2d(Y) ** 2, axis=1)
    return np.where(r2 > cfg.R**2, (r2 - cfg.R**2) ** 2, 0.0)


def grad_lyapunov_w(Y, cfg: Example8Config) -> np.ndarray:
    Y = np.atleast_2d(Y)
    r2 = np.sum(Y**2, axis=1)
    return np.where((r2 > cfg.R**2)[:, None], 4.0 * (r2 - cfg.R**2)[:, None] * Y, 0.0)


def lyapunov_setup(cfg: Example8Config, delta: float = 1.0, omega=None, g=None, seed: int = 0):
    """Lyapunov setup with ``w`` above; ``omega`` defaults to ``B(0, R)`` and must contain it."""
    from .certify import LyapunovSetup
    from .core import Ball

    R = cfg.R
    omega = Ball((0.0, 0.0), R) if omega is None else omega
    ring = R * np.stack([np.cos(np.linspace(0, 2 * np.pi, 256)), np.sin(np.linspace(0, 2 * np.pi, 256))], 1)
    if not np.all(omega.contains(ring * (1 - 1e-9))):
        raise ValidationError("omega", f"must contain B(0, {R:g})")
    r_delta = np.sqrt(R**2 + np.sqrt(delta))
    half = 1.02 * r_delta + 0.05
    return LyapunovSetup(lambda Y: lyapunov_w(Y, cfg), lambda Y: grad_lyapunov_w(Y, cfg), omega, delta,
                         ((-half, -half), (half, half)), g=g, seed=seed)


def value_bounds(Y, cfg: Example8Config, alpha: Optional[float] = None):
    """Lower and upper bounds ``V0 <= V_alpha <= (1 + alpha/2) V0``."""
    a = cfg.alpha if alpha is None else alpha
    base = v0(Y, cfg)
    return base, (1.0 + 0.5 * a) * base


def stability_envelope(t, y0, cfg: Example8Config, alpha: Optional[float] = None) -> np.ndarray:
    a = cfg.alpha if alpha is None else alpha
    return np.sqrt(1.0 + a) * np.exp(-np.asarray(t) / ((1.0 + a) * np.sqrt(cfg.beta))) * np.linalg.norm(y0)


def in_shadow(Y, cfg: Example8Config, pad: float = 1e-9) -> np.ndarray:
    """Whether the segment from ``y`` to the origin meets the bump's support.

    Off the shadow the bump-free rollout has running cost ``|y|^2/2`` and so
    attains the lower bound ``V0``; it is then the unique optimum.
    """
    Y = np.atleast_2d(Y)
    z = np.array(cfg.z)
    yy = np.sum(Y * Y, axis=1)
    tpar = np.clip(np.where(yy > 0, Y @ z / np.where(yy > 0, yy, 1.0), 0.0), 0.0, 1.0)
    dist = np.linalg.norm(Y * tpar[:, None] - z, axis=1)
    return dist < cfg.sigma + pad


# ---------------------------------------------------------------------------
# transcription and polishing


@dataclass
class OpenLoopSolution:
    """One local optimum of the open-loop problem from ``y0``."""

    y0: np.ndarray
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    J: float
    J_transcription: float
    converged: bool
    polished: bool
    start: str
    path_t: Optional[np.ndarray] = None
    path_y: Optional[np.ndarray] = None
    path_u: Optional[np.ndarray] = None
    shoot_residual: float = np.nan

    @property
    def u_init(self) -> np.ndarray:
        return self.u[0]

    def supergradient(self, beta: float) -> np.ndarray:
        """Element ``-beta u*(0)`` of the superdifferential of the value."""
        return -beta * self.u[0]


def _states(y0, u, horizon):
    n = len(u)
    h = horizon / (n - 1)
    y = np.empty_like(u)
    y[0] = y0
    y[1:] = y0 + np.cumsum(0.5 * h * (u[:-1] + u[1:]), axis=0)
    return y


def _transcribe(y0, u_init, cfg: Example8Config, alpha: float, nodes: Optional[int] = None):
    n = cfg.nodes if nodes is None else nodes
    y0 = np.asarray(y0, dtype=float)
    z = np.array(cfg.z)
    g = np.empty((n, 2))

    def fg(x):
        J = kernels.transcription_cost(x.reshape(n, 2), y0, cfg.horizon, alpha, z, cfg.sigma, cfg.beta, g)
        return J, g.ravel().copy()

    res = minimize(fg, np.ascontiguousarray(u_init, dtype=float).ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "maxcor": 20, "ftol": 1e-15, "gtol": 1e-10})
    u = res.x.reshape(n, 2)
    _, grad = fg(res.x)
    h = cfg.horizon / (n - 1)
    # gradient w.r.t. nodal controls scales with h; normalize before testing
    converged = bool(res.success or np.max(np.abs(grad)) / h < 1e-5 * (1.0 + np.linalg.norm(y0)))
    return u, float(res.fun), converged


def _shoot(y0, u0, Ts, cfg, alpha):
    n = max(10, int(np.ceil(Ts / cfg.polish_dt)))
    tr = np.empty((n + 1, 5))
    kernels.pmp_shoot(np.asarray(y0, float), np.asarray(u0, float), Ts, n, alpha, np.array(cfg.z),
                      cfg.sigma, cfg.beta, tr)
    r = np.sqrt(cfg.beta) * tr[-1, 2:4] + tr[-1, :2]
    return r, tr


def _polish(y0, u, J_tr, cfg: Example8Config, alpha: float):
    """Newton shooting on ``u(0)`` with the bump-free tail condition.

    Returns ``(u0, J, path, residual)`` or ``None`` when the shot does not
    reproduce the transcription optimum.
    """
    y = _states(y0, u, cfg.horizon)
    t = np.linspace(0.0, cfg.horizon, len(u))
    rin = 0.95 * cfg.r_free
    inside = np.linalg.norm(y, axis=1) < rin
    if not inside.any():
        return None
    k = int(np.argmax(inside))
    if k == 0:
        u0 = -np.asarray(y0) / np.sqrt(cfg.beta)
        path = np.concatenate([np.atleast_2d(y0), np.atleast_2d(u0), [[0.0]]], axis=1)
        return u0, float(v0(y0, cfg)[0]), (np.array([0.0]), path), 0.0
    Ts = t[k]
    x = u[0].copy()
    r, tr = _shoot(y0, x, Ts, cfg, alpha)
    nr = np.linalg.norm(r)
    for _ in range(60):
        if nr < 1e-11 * (1.0 + np.linalg.norm(y0)):
            break
        Jm = np.empty((2, 2))
        dlt = 1e-7 * (1.0 + np.linalg.norm(x))
        for j in range(2):
            e = np.zeros(2)
            e[j] = dlt
            Jm[:, j] = (_shoot(y0, x + e, Ts, cfg, alpha)[0] - _shoot(y0, x - e, Ts, cfg, alpha)[0]) / (2 * dlt)
        try:
            step = -np.linalg.solve(Jm, r)
        except np.linalg.LinAlgError:
            return None
        s = 1.0
        while s > 1e-6:
            rn, trn = _shoot(y0, x + s * step, Ts, cfg, alpha)
            if np.linalg.norm(rn) < (1.0 - 1e-4 * s) * nr:
                break
            s *= 0.5
        if s <= 1e-6:
            break
        x, r, tr, nr = x + s * step, rn, trn, np.linalg.norm(rn)
    J = tr[-1, 4] + 0.5 * np.sqrt(cfg.beta) * float(np.dot(tr[-1, :2], tr[-1, :2]))
    # agreement with the transcription: same cost and same path
    tt = np.linspace(0.0, Ts, len(tr))
    yi = np.stack([np.interp(t[: k + 1], tt, tr[:, a]) for a in range(2)], axis=1)
    dev = float(np.max(np.abs(yi - y[: k + 1])))
    if nr > 1e-8 * (1.0 + np.linalg.norm(y0)) or abs(J - J_tr) > 1e-3 * (1.0 + abs(J_tr)) or dev > 0.05:
        return None
    return x, float(J), (tt, tr), float(nr)


def _starts(y0, cfg: Example8Config, alpha: float, rng, full: bool = True):
    t = np.linspace(0.0, cfg.horizon, cfg.nodes)
    base = v0_open_loop(y0, t, cfg)
    out = [("v0", base)]
    if not full:
        return out
    out.append(("mirror", base * np.array([1.0, -1.0])))
    out.append(("axis", onaxis_controls(y0, cfg, alpha)))
    sb = np.sqrt(cfg.beta)
    scale = 0.5 * (1.0 + np.linalg.norm(y0))
    Ts = min(cfg.horizon, 4.0 * sb)
    for i in range(cfg.n_random):
        coef = rng.normal(size=(3, 2)) * scale
        modes = np.stack([np.exp(-t / sb), np.sin(np.pi * np.minimum(t, Ts) / Ts),
                          np.sin(2 * np.pi * np.minimum(t, Ts) / Ts)], axis=1)
        out.append((f"random{i}", base + modes @ coef))
    return out


def onaxis_controls(y0, cfg: Example8Config, alpha: float) -> np.ndarray:
    """Controls of the radial path ``y' = -y sqrt(1 + alpha psi) / sqrt(beta)``."""
    t = np.linspace(0.0, cfg.horizon, cfg.nodes)
    path = _radial_path(np.asarray(y0, dtype=float), t, cfg, alpha)
    fac = np.sqrt(1.0 + alpha * psi(np.linalg.norm(path - np.array(cfg.z), axis=1) / cfg.sigma))
    return -path * fac[:, None] / np.sqrt(cfg.beta)


def _radial_path(y0, t, cfg, alpha):
    """The path keeps its direction, so only the radius needs integrating."""
    from scipy.integrate import solve_ivp

    r0 = float(np.linalg.norm(y0))
    if r0 == 0.0:
        return np.zeros((len(t), len(y0)))
    e = y0 / r0
    z = np.array(cfg.z)
    sb = np.sqrt(cfg.beta)

    def rhs(_, r):
        return -r * np.sqrt(1.0 + alpha * psi(np.array([np.linalg.norm(r[0] * e - z) / cfg.sigma]))[0]) / sb

    sol = solve_ivp(rhs, (t[0], t[-1]), [r0], t_eval=t, rtol=1e-10, atol=1e-12, max_step=0.2)
    return sol.y[0][:, None] * e


def _dedup(sols, tol):
    kept = []
    for s in sorted(sols, key=lambda s: s.J):
        if all(np.max(np.abs(s.y - k.y)) >= tol for k in kept):
            kept.append(s)
    return kept


def solve_open_loop(y0, cfg: Example8Config, alpha: Optional[float] = None, full: bool = True,
                    seed_key: int = 0, polish: bool = True) -> list[OpenLoopSolution]:
    """Distinct converged local optima from ``y0``, best first.

    ``full=False`` runs only the bump-free rollout start.
    """
    a = cfg.alpha if alpha is None else alpha
    y0 = np.asarray(y0, dtype=float)
    rng = make_rng(cfg.seed, 8, seed_key)
    t = np.linspace(0.0, cfg.horizon, cfg.nodes)
    raw = []
    for label, u_init in _starts(y0, cfg, a, rng, full):
        u, J, conv = _transcribe(y0, u_init, cfg, a)
        raw.append(OpenLoopSolution(y0, t, u, _states(y0, u, cfg.horizon), J, J, conv, False, label))
    good = [s for s in raw if s.converged]
    if not good:
        logger.warning("no converged transcription from y0=%s", y0)
        return [replace(s) for s in _dedup(raw, cfg.dedup_tol)]
    sols = _dedup(good, cfg.dedup_tol)
    if polish:
        # only candidates that can tie with the best need the accurate cost
        j_best = sols[0].J
        for s in sols:
            if s.J - j_best <= 10.0 * cfg.tie_tol + 1e-3 * abs(j_best):
                _apply_polish(s, cfg, a)
    sols.sort(key=lambda s: s.J)
    return sols


def _apply_polish(s: OpenLoopSolution, cfg: Example8Config, alpha: float) -> None:
    out = _polish(s.y0, s.u, s.J_transcription, cfg, alpha)
    if out is None:
        # retry from a refined transcription seeded by interpolation
        n = 8 * (cfg.nodes - 1) + 1
        tf = np.linspace(0.0, cfg.horizon, n)
        ui = np.stack([np.interp(tf, s.t, s.u[:, a]) for a in range(2)], axis=1)
        uf, Jf, conv = _transcribe(s.y0, ui, cfg, alpha, nodes=n)
        if conv:
            out = _polish(s.y0, uf, Jf, cfg, alpha)
    if out is None:
        logger.info("polish failed at y0=%s (start %s); keeping transcription", s.y0, s.start)
        return
    u0, J, (tt, tr), res = out
    s.J = J
    s.polished = True
    s.path_t = tt
    s.path_y = tr[:, :2].copy()
    s.path_u = tr[:, 2:4].copy()
    s.shoot_residual = res
    s.u = s.u.copy()
    s.u[0] = u0


def pmp_residuals(sol: OpenLoopSolution, cfg: Example8Config, alpha: Optional[float] = None) -> dict:
    """Energy identity and second-difference residual along the polished path."""
    a = cfg.alpha if alpha is None else alpha
    if not sol.polished:
        y, u, t = sol.y, sol.u, sol.t
    else:
        y, u, t = sol.path_y, sol.path_u, sol.path_t
    ell = ell_alpha(y, cfg, a)
    energy = float(np.max(np.abs(ell - 0.5 * cfg.beta * np.sum(u * u, axis=1))))
    if len(t) >= 3:
        dt = t[1] - t[0]
        sd = (y[2:] - 2 * y[1:-1] + y[:-2]) / dt**2 - grad_ell_alpha(y[1:-1], cfg, a) / cfg.beta
        second = float(np.max(np.abs(sd)))
    else:
        second = 0.0
    return {"energy": energy, "second_difference": second}


# ---------------------------------------------------------------------------
# probes


def onaxis_cost(y01: float, cfg: Example8Config, alpha: Optional[float] = None) -> float:
    """Cost of the on-axis path from ``(y01, 0)``: ``int_0^|y01| sqrt(beta) s sqrt(1+alpha psi) ds``."""
    from scipy.integrate import quad

    a = cfg.alpha if alpha is None else alpha
    sgn = np.sign(y01) if y01 != 0 else 1.0
    z1 = cfg.z[0]

    def integrand(s):
        return np.sqrt(cfg.beta) * s * np.sqrt(1.0 + a * psi(np.array([abs(sgn * s - z1) / cfg.sigma]))[0])

    pts = [p for p in (abs(z1) - cfg.sigma, abs(z1), abs(z1) + cfg.sigma) if 0 < p < abs(y01)]
    val, _ = quad(integrand, 0.0, abs(y01), points=pts or None, limit=400, epsabs=1e-13, epsrel=1e-13)
    return float(val)


def onaxis_trajectory(y01: float, cfg: Example8Config, alpha: Optional[float] = None, T: float = 15.0,
                      n: int = 1501):
    """On-axis feedback path ``y1' = -y1 sqrt(1+alpha psi)/sqrt(beta)`` and its cost."""
    a = cfg.alpha if alpha is None else alpha
    t = np.linspace(0.0, T, n)
    path = _radial_path(np.array([y01, 0.0]), t, cfg, a)
    return t, path, onaxis_cost(y01, cfg, a)


@dataclass
class SuperdiffProbe:
    """Superdifferential estimate at ``y0`` from the distinct optima."""

    y0: np.ndarray
    optima: list
    supergradients: np.ndarray
    hull: np.ndarray
    diameter: float
    cost_spread: float
    nondifferentiable: bool


def superdifferential_probe(y0, cfg: Example8Config, alpha: Optional[float] = None,
                            theta_diam: float = 1e-6, seed_key: int = 0) -> SuperdiffProbe:
    """Convex hull of ``-beta u*(0)`` over near-tied distinct optima."""
    a = cfg.alpha if alpha is None else alpha
    sols = solve_open_loop(y0, cfg, a, full=True, seed_key=seed_key)
    best = sols[0].J
    tied = [s for s in sols if s.J - best <= cfg.tie_tol]
    P = np.array([s.supergradient(cfg.beta) for s in tied])
    hull = _hull(P)
    diam = float(max((np.linalg.norm(p - q) for p in P for q in P), default=0.0))
    spread = float(max(s.J for s in tied) - best)
    return SuperdiffProbe(np.asarray(y0, float), tied, P, hull, diam, spread,
                          bool(len(tied) >= 2 and diam >= theta_diam))


def _hull(P: np.ndarray) -> np.ndarray:
    if len(P) <= 2:
        return P
    from scipy.spatial import ConvexHull, QhullError

    try:
        return P[ConvexHull(P).vertices]
    except QhullError:
        # collinear points: keep the two extremes
        c = P - P.mean(axis=0)
        direction = np.linalg.svd(c)[2][0]
        proj = c @ direction
        return P[[int(np.argmin(proj)), int(np.argmax(proj))]]


def solver_noise(cfg: Example8Config, alpha: Optional[float] = None, points=None) -> float:
    """Spread of ``u*(0)`` across multistarts at points where the value is smooth."""
    a = cfg.alpha if alpha is None else alpha
    if points is None:
        points = [(0.8, 0.3), (-1.0, 0.5), (3.0, -2.0), (-4.0, 3.5)]
    noise = 0.0
    for k, y0 in enumerate(points):
        rng = make_rng(cfg.seed, 9, k)
        y0 = np.asarray(y0, float)
        u0s = []
        for label, u_init in _starts(y0, cfg, a, rng, True):
            u, J, conv = _transcribe(y0, u_init, cfg, a)
            if not conv:
                continue
            t = np.linspace(0.0, cfg.horizon, len(u))
            s = OpenLoopSolution(y0, t, u, _states(y0, u, cfg.horizon), J, J, conv, False, label)
            _apply_polish(s, cfg, a)
            u0s.append((s.J, s.u[0]))
        # distinct local minima are not noise; compare only starts that reach the best cost
        j_best = min((j for j, _ in u0s), default=0.0)
        U = np.array([u for j, u in u0s if j - j_best <= cfg.tie_tol])
        if len(U) > 1:
            noise = max(noise, float(np.max(np.linalg.norm(U[:, None] - U[None], axis=2))))
    return noise


def theta_diam(cfg: Example8Config, alpha: Optional[float] = None, floor: float = 1e-9) -> float:
    """Non-differentiability threshold: ten times the measured solver noise."""
    return max(10.0 * solver_noise(cfg, alpha), floor)


def stability_check(sol: OpenLoopSolution, cfg: Example8Config, alpha: Optional[float] = None,
                    tol: float = 1e-6):
    """Exponential envelope, initial-speed bound and sign condition on one optimum.

    Returns a ``BoundCertificate`` whose ``lhs``/``rhs`` are the worst ratio
    ``|y(t)| / envelope(t)`` and 1; the other two checks sit in ``constants``.
    """
    from .certify import BoundCertificate

    a = cfg.alpha if alpha is None else alpha
    t = sol.t
    y = sol.y
    if sol.polished and sol.path_t is not None and len(sol.path_t) > 1:
        # polished head, then the exact bump-free tail
        Ts = sol.path_t[-1]
        tail = t > Ts
        yT = sol.path_y[-1]
        y_tail = np.exp(-(t[tail] - Ts) / np.sqrt(cfg.beta))[:, None] * yT
        t = np.concatenate([sol.path_t, t[tail]])
        y = np.concatenate([sol.path_y, y_tail])
    y0 = np.asarray(sol.y0, dtype=float)
    env = stability_envelope(t, y0, cfg, a)
    r0 = float(np.linalg.norm(y0))
    ratio = float(np.max((np.linalg.norm(y, axis=1) - tol) / np.maximum(env, 1e-300))) if r0 > 0 else 0.0
    u0 = np.asarray(sol.u[0], dtype=float)
    speed_bound = float(np.sqrt((1.0 + a) / cfg.beta) * r0)
    speed_ok = bool(np.linalg.norm(u0) <= speed_bound * (1 + tol) + tol)
    outside_bump = bool(np.linalg.norm(y0 - np.array(cfg.z)) > cfg.sigma)
    sign = float(u0 @ y0)
    sign_ok = bool(sign < 0) if (outside_bump and r0 > 0) else True
    ok = ratio <= 1.0 + tol and speed_ok and sign_ok
    consts = {"alpha": a, "u0_norm": float(np.linalg.norm(u0)), "u0_bound": speed_bound, "u0_dot_y0": sign,
              "sign_checked": outside_bump, "speed_ok": speed_ok, "sign_ok": sign_ok, "envelope_ratio": ratio}
    return BoundCertificate("stability", "exponential_stability", 1.0, ratio, tol=tol, constants=consts,
                            status="pass" if ok else "fail")


def alpha_trend(y0, cfg: Example8Config, alphas) -> list:
    """Best cost and bump exposure of the optimal path as the bump height grows.

    Exposure is the time integral of ``psi(|y - z| / sigma)`` along the
    optimal path; it should decay as ``alpha`` grows and the optimum learns
    to avoid the bump. Logged only: no rate is available.
    """
    y0 = np.asarray(y0, float)
    z = np.asarray(cfg.z, float)
    rows = []
    for a in sorted(float(x) for x in alphas):
        best = solve_open_loop(y0, cfg, a)[0]
        t, y = (best.path_t, best.path_y) if best.polished else (best.t, best.y)
        dist = np.linalg.norm(y - z, axis=1)
        exposure = float(trapezoid(psi(dist / cfg.sigma), t))
        row = {"alpha": a, "J": best.J, "u0_1": float(best.u[0][0]), "u0_2": float(best.u[0][1]),
               "min_dist_to_z": float(dist.min()), "bump_exposure": exposure, "polished": best.polished}
        logger.info("alpha trend: alpha=%g J=%.9g min|y-z|=%.4g exposure=%.3e", a, best.J, row["min_dist_to_z"],
                    exposure)
        rows.append(row)
    return rows


def nondiff_predicate(y0, cfg: Example8Config, alpha: float, theta: float, min_axis_gap: float = 1e-2,
                      seed_key: int = 0) -> dict:
    """Check for a mirror pair of optima beating the on-axis path at an on-axis ``y0``."""
    probe = superdifferential_probe(y0, cfg, alpha, theta_diam=theta, seed_key=seed_key)
    u2 = np.array([s.u[0][1] for s in probe.optima])
    best = probe.optima[0].J
    axis = onaxis_cost(float(y0[0]), cfg, alpha)
    pair = bool(len(u2) >= 2 and u2.max() >= theta and u2.min() <= -theta)
    gap = axis - best
    return {
        "alpha": alpha,
        "pair": pair,
        "cost_spread": probe.cost_spread,
        "u2": u2.tolist(),
        "best": best,
        "axis_cost": axis,
        "axis_gap": gap,
        "ok": bool(pair and probe.cost_spread <= cfg.tie_tol and gap >= min_axis_gap),
    }


def alpha_bar(cfg: Example8Config, y0=(-5.0, 0.0), hi: float = 50.0, lo: float = 0.0, tol: float = 0.05,
              theta: Optional[float] = None) -> dict:
    """Bisection for the smallest bump height producing the non-differentiability pattern."""
    theta = theta_diam(cfg, hi) if theta is None else theta
    y0 = np.asarray(y0, float)
    top = nondiff_predicate(y0, cfg, hi, theta)
    history = [top]
    if not top["ok"]:
        return {"alpha_bar": None, "theta": theta, "history": history}
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = nondiff_predicate(y0, cfg, mid, theta)
        history.append(res)
        if res["ok"]:
            hi = mid
        else:
            lo = mid
    return {"alpha_bar": hi, "theta": theta, "history": history}


# ---------------------------------------------------------------------------
# value grid


@dataclass
class NodeResult:
    y0: np.ndarray
    J: float
    u0: np.ndarray
    converged: bool
    polished: bool
    shadow: bool
    n_optima: int
    diameter: float
    nondiff: bool


@dataclass
class ValueGrid:
    """Per-node optimal costs and the interpolating value field."""

    cfg: Example8Config
    alpha: float
    grid: BoxGrid
    nodes: list
    theta: float
    field_: Optional[ScalarField] = field(default=None)

    @property
    def values(self) -> np.ndarray:
        return np.array([n.J for n in self.nodes])

    def as_field(self, order: str = "linear") -> ScalarField:
        return ScalarField(self.grid, self.values, order=order, name=f"V_alpha={self.alpha:g}")

    def flags(self) -> np.ndarray:
        return np.array([_flag(n) for n in self.nodes])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# quantity: optimal cost V_alpha from multistart transcription; flag: ok|unconverged|unpolished"])
        w.writerow(["y0_1", "y0_2", "J", "u0_1", "u0_2", "flag"])
        for n in self.nodes:
            w.writerow([repr(float(n.y0[0])), repr(float(n.y0[1])), repr(float(n.J)),
                        repr(float(n.u0[0])), repr(float(n.u0[1])), _flag(n)])
        return buf.getvalue()

    def nondiff_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# quantity: superdifferential diameter of V_alpha from near-tied optima; nondiff: 1 if flagged"])
        w.writerow(["y0_1", "y0_2", "n_optima", "diameter", "nondiff"])
        for n in self.nodes:
            w.writerow([repr(float(n.y0[0])), repr(float(n.y0[1])), n.n_optima, repr(float(n.diameter)),
                        int(n.nondiff)])
        return buf.getvalue()


    def difference_quotients(self, bands: int = 6) -> dict:
        """Largest axis-neighbour difference quotient of ``V_alpha``, overall and per radius band.

        Pairs touching an unconverged node are skipped. Reported only: no
        explicit Lipschitz constant is available to compare against.
        """
        shape = self.grid.shape
        V = self.values.reshape(shape)
        ok = np.array([n.converged for n in self.nodes]).reshape(shape)
        X = self.grid.nodes().reshape(*shape, 2)
        h = self.grid.spacing
        q_all, r_all = [], []
        for a in range(2):
            sl_lo = [slice(None)] * 2
            sl_hi = [slice(None)] * 2
            sl_lo[a], sl_hi[a] = slice(None, -1), slice(1, None)
            lo, hi = tuple(sl_lo), tuple(sl_hi)
            good = ok[lo] & ok[hi]
            q_all.append((np.abs(V[hi] - V[lo]) / h[a])[good])
            r_all.append(np.linalg.norm(0.5 * (X[lo] + X[hi]), axis=-1)[good])
        q, r = np.concatenate(q_all), np.concatenate(r_all)
        edges = np.linspace(0.0, float(r.max()) if len(r) else 1.0, bands + 1)
        per_band = []
        for k in range(bands):
            sel = (r >= edges[k]) & ((r < edges[k + 1]) | (k == bands - 1))
            per_band.append({"r_lo": float(edges[k]), "r_hi": float(edges[k + 1]),
                             "max_quotient": float(q[sel].max()) if sel.any() else None})
        return {"max_quotient": float(q.max()) if len(q) else None, "pairs": int(len(q)), "bands": per_band}


def _flag(n: NodeResult) -> str:
    if not n.converged:
        return "unconverged"
    if not n.polished:
        return "unpolished"
    return "ok"


def _solve_node(args):
    y0, cfg, alpha, key, multistart, theta = args
    shadow = bool(in_shadow(y0, cfg)[0])
    full = multistart == "all" or (multistart == "shadow" and shadow)
    sols = solve_open_loop(y0, cfg, alpha, full=full, seed_key=key)
    best = sols[0]
    tied = [s for s in sols if s.J - best.J <= cfg.tie_tol and s.converged]
    P = np.array([s.supergradient(cfg.beta) for s in tied]) if tied else np.zeros((0, 2))
    diam = float(max((np.linalg.norm(p - q) for p in P for q in P), default=0.0))
    return NodeResult(np.asarray(y0, float), best.J, best.u[0].copy(), best.converged, best.polished, shadow,
                      len(tied), diam, bool(len(tied) >= 2 and diam >= theta))


def value_alpha_grid(cfg: Example8Config, alpha: Optional[float] = None, grid: Optional[BoxGrid] = None,
                     multistart: str = "shadow", jobs: int = 1, theta: Optional[float] = None,
                     points: Optional[np.ndarray] = None) -> ValueGrid:
    """Optimal cost at every grid node.

    ``multistart="shadow"`` runs the full start set only where the segment
    to the origin crosses the bump; elsewhere the bump-free rollout is
    provably optimal and serves as the single start. ``"all"`` runs the
    full set everywhere.
    """
    if multistart not in ("shadow", "all", "single"):
        raise ValidationError("multistart", f"unknown mode {multistart!r}")
    a = cfg.alpha if alpha is None else alpha
    grid = cfg.grid if grid is None else grid
    theta = theta_diam(cfg, a) if theta is None else theta
    X = grid.nodes() if points is None else np.atleast_2d(points)
    tasks = [(X[i], cfg, a, i, multistart, theta) for i in range(len(X))]
    if jobs > 1:
        with mp.get_context("fork").Pool(jobs) as pool:
            nodes = pool.map(_solve_node, tasks, chunksize=max(1, len(tasks) // (8 * jobs)))
    else:
        nodes = [_solve_node(tk) for tk in tasks]
    n_bad = sum(not n.converged for n in nodes)
    if n_bad:
        logger.warning("%d of %d nodes did not converge", n_bad, len(nodes))
    return ValueGrid(cfg, a, grid, nodes, theta)
