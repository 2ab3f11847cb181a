"""Executable error and escape-time certificates.

Right-hand sides are assembled from sampled constants, left-hand sides are
measured by closed-loop simulation, and each comparison is returned as a
``BoundCertificate`` that records every constant it used.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (Ball, Box, BoxGrid, ControlProblem, DomainError, Region, RegionSample, ScalarField,
                   SubLevel, ValidationError, lipschitz_estimate, make_rng, matrix_lipschitz, to_jsonable)
from .regularize import MoreauField, moreau_envelope, mollify
from .simulate import COMPLETED, SimConfig, cost_value, integrate_batch, integrate_closed_loop

logger = logging.getLogger(__name__)

TAU_MAX = 50.0
DIV_GUARD = 1e-14


# ---------------------------------------------------------------------------
# Lyapunov setup


def _boundary_points(region: Region, n: int) -> np.ndarray:
    """Points on the boundary of balls and 2-D boxes; empty otherwise."""
    if isinstance(region, Ball):
        d = len(region.center)
        if d == 2:
            th = 2 * np.pi * np.arange(n) / n
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        else:
            dirs = make_rng(0, 41).normal(size=(n, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return region.center + region.radius * (1 - 1e-9) * dirs
    if isinstance(region, Box) and len(region.lower) == 2:
        k = max(n // 4, 1)
        s = np.linspace(0.0, 1.0, k, endpoint=False)
        lo, hi = region.lower, region.upper
        e = [np.stack([lo[0] + s * (hi[0] - lo[0]), np.full(k, lo[1])], 1),
             np.stack([np.full(k, hi[0]), lo[1] + s * (hi[1] - lo[1])], 1),
             np.stack([hi[0] - s * (hi[0] - lo[0]), np.full(k, hi[1])], 1),
             np.stack([np.full(k, lo[0]), hi[1] - s * (hi[1] - lo[1])], 1)]
        return np.concatenate(e)
    return np.empty((0, len(region.bbox[0])))


@dataclass
class LyapunovSetup:
    """Lyapunov-type function ``w`` with the sets ``omega`` and ``omega_delta``.

    ``bbox`` must contain ``omega_delta = {w < sup_omega w + delta}``.
    ``g`` defaults to zero.
    """

    w: Callable
    grad_w: Callable
    omega: Region
    delta: float
    bbox: tuple
    g: Optional[Callable] = None
    n_sup: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValidationError("delta", f"must be positive, got {self.delta}")
        pts = np.concatenate([self.omega.sample(self.n_sup, make_rng(self.seed, 43)),
                              _boundary_points(self.omega, 256)])
        self.sup_w = float(np.max(self.w(pts)))
        lo, hi = (np.asarray(b, dtype=float) for b in self.bbox)
        self.omega_delta = SubLevel(self.w, self.sup_w + self.delta, lo, hi)
        if not np.all(self.omega_delta.contains(pts)):
            raise ValidationError("omega", "omega is not contained in omega_delta (check bbox)")
        edge = _boundary_points(Box(lo, hi), 400)
        if len(edge) and np.any(self.w(edge) < self.sup_w + self.delta):
            raise ValidationError("bbox", "omega_delta reaches the bounding box")
        if self.g is not None:
            gmin = float(np.min(self.g_eval(self.sample_delta(4000, self.seed))))
            if gmin < -1e-12:
                raise ValidationError("g", f"must be nonnegative, sampled minimum {gmin:.3g}")

    def g_eval(self, Y) -> np.ndarray:
        Y = np.atleast_2d(Y)
        if self.g is None:
            return np.zeros(len(Y))
        return np.asarray(self.g(Y), dtype=float).reshape(len(Y))

    def sample_delta(self, n: int, seed: int = 0) -> np.ndarray:
        return self.omega_delta.sample(n, make_rng(seed, 47))

    def starts(self, n: int = 256, n_boundary: int = 64, seed: int = 0) -> np.ndarray:
        """Initial states in ``omega``: uniform samples plus boundary points."""
        pts = self.omega.sample(n, make_rng(seed, 53))
        return np.concatenate([pts, _boundary_points(self.omega, n_boundary)])

    def grad_w_sup(self, n: int = 20000, seed: int = 0) -> float:
        return float(np.max(np.linalg.norm(self.grad_w(self.sample_delta(n, seed)), axis=1)))


def supersolution_violation(setup: LyapunovSetup, problem: ControlProblem, grad_phi: Callable,
                            points, tol: float = 1e-9) -> float:
    """Fraction of ``points`` where ``grad w . (f + B u_phi) <= g`` fails."""
    X = np.atleast_2d(points)
    X = X[setup.omega_delta.contains(X)]
    if len(X) == 0:
        return 0.0
    P = np.asarray(grad_phi(X))
    U = -np.einsum("nij,ni->nj", problem.control_matrix(X), P) / problem.beta
    lhs = np.sum(setup.grad_w(X) * problem.velocity(X, U), axis=1)
    bad = lhs > setup.g_eval(X) + tol * (1 + np.abs(lhs))
    return float(np.mean(bad))


# ---------------------------------------------------------------------------
# sampled sigma quantities


def _directions(d: int, n: int, seed: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        th = 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    g = make_rng(seed, 59).normal(size=(n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _matrix_sup(problem: ControlProblem, X) -> float:
    return float(np.max(np.linalg.norm(problem.control_matrix(X), ord=2, axis=(1, 2))))


def modulus_of_continuity(grad: Callable, region: Region, r_max: float, n_pairs: int = 40000,
                          seed: int = 0) -> Callable:
    """Sampled modulus ``h(r) = max |grad(a) - grad(b)|`` over pairs with ``|a-b| <= r``.

    Pair distances are log-uniform on ``[1e-4 r_max, r_max]``; the envelope
    is the running maximum over sorted distances.
    """
    rng = make_rng(seed, 61)
    A = region.sample(n_pairs, rng)
    d = A.shape[1]
    dirs = rng.normal(size=(n_pairs, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rho = r_max * 10 ** rng.uniform(-4, 0, size=n_pairs)
    Bp = A + rho[:, None] * dirs
    keep = region.contains(Bp)
    dist = rho[keep]
    dg = np.linalg.norm(np.asarray(grad(A[keep])) - np.asarray(grad(Bp[keep])), axis=1)
    order = np.argsort(dist)
    dist, env = dist[order], np.maximum.accumulate(dg[order])

    def h(r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(dist, r, side="right") - 1
        out = np.where(idx >= 0, env[np.clip(idx, 0, None)], 0.0)
        return np.where(r > r_max, env[-1] if len(env) else 0.0, out)

    return h


@dataclass
class SigmaQuantities:
    sigma1: float
    sigma2: float
    sigma1_lambda: Optional[float]
    eps: float
    lam: Optional[float]
    constants: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return to_jsonable(self.__dict__)


def sigma_quantities(setup: LyapunovSetup, problem: ControlProblem, eps: float,
                     moreau: Optional[MoreauField] = None, n_centers: int = 1000, n_dirs: int = 64,
                     n_radii: int = 8, seed: int = 0, domain=None) -> SigmaQuantities:
    """Sampled suprema over ``x`` in ``omega_delta`` and ``y`` in ``B(x, eps)``.

    With ``moreau`` the perturbation ``g_lambda`` is assembled from the
    nodal minimizer displacement ``|x - y|`` and the sampled modulus of
    continuity of ``grad w``; norms of ``f`` and ``B`` are taken over the
    Moreau grid box.
    """
    if not np.isfinite(eps) or eps <= 0:
        raise ValidationError("eps", f"must be positive, got {eps}")
    X = setup.sample_delta(n_centers, seed)
    d = X.shape[1]
    dirs = _directions(d, n_dirs, seed)
    radii = eps * np.arange(1, n_radii + 1) / n_radii
    Y = (X[:, None, None, :] + radii[None, :, None, None] * dirs[None, None, :, :]).reshape(-1, d)
    Xr = np.repeat(X, len(radii) * len(dirs), axis=0)
    if domain is not None and not np.all(domain.contains(Y)):
        raise ValidationError("eps", f"omega_delta + B(0,{eps:g}) leaves the domain")
    gwx, gwy = setup.grad_w(X), setup.grad_w(Y)
    wf_x = np.repeat(np.sum(gwx * problem.drift(X), axis=1), len(radii) * len(dirs))
    wf_y = np.sum(gwy * problem.drift(Y), axis=1)
    g_y = setup.g_eval(Y)
    s1 = float(np.max(np.abs(g_y - wf_y + wf_x)))
    btw_x = np.repeat(np.einsum("nij,ni->nj", problem.control_matrix(X), gwx), len(radii) * len(dirs), axis=0)
    btw_y = np.einsum("nij,ni->nj", problem.control_matrix(Y), gwy)
    s2 = float(np.max(np.linalg.norm(btw_x - btw_y, axis=1)))
    consts = {"n_centers": n_centers, "n_dirs": len(dirs), "n_radii": n_radii, "seed": seed}
    s1l = None
    lam = None
    if moreau is not None:
        lam = moreau.lam
        if not np.all(moreau.grid.contains(Y)):
            raise ValidationError("eps", f"omega_delta + B(0,{eps:g}) leaves the Moreau grid")
        big = Box(np.array(moreau.grid.lower), np.array(moreau.grid.upper))
        Z = big.sample(20000, make_rng(seed, 67))
        f_sup = float(np.max(np.linalg.norm(problem.drift(Z), axis=1)))
        B_sup = _matrix_sup(problem, Z)
        f_lip = lipschitz_estimate(problem.drift, big, seed=seed)
        B_lip = matrix_lipschitz(problem.B, big, seed=seed)[0]
        gw_sup = float(np.max(np.linalg.norm(setup.grad_w(Z), axis=1)))
        disp = moreau.displacement.eval(Y)
        hw = modulus_of_continuity(setup.grad_w, setup.omega_delta, max(float(disp.max()), 1e-12), seed=seed)
        beta = problem.beta
        g_lam = g_y + hw(disp) * (f_sup + disp / (beta * lam) * B_sup**2) + f_lip * gw_sup * disp \
            + 2.0 / beta * disp**2 / lam * B_lip**2 * gw_sup
        s1l = float(np.max(np.abs(g_lam - wf_y + wf_x)))
        consts.update({"f_sup": f_sup, "B_sup": B_sup, "f_lip": f_lip, "B_lip": B_lip,
                       "grad_w_sup": gw_sup, "max_displacement": float(disp.max())})
    logger.debug("sigma eps=%g: s1=%.4g s2=%.4g s1_lam=%s", eps, s1, s2, s1l)
    return SigmaQuantities(s1, s2, s1l, float(eps), lam, consts)


# ---------------------------------------------------------------------------
# certificates


@dataclass
class BoundCertificate:
    """Predicted bound versus measured quantity.

    ``relation="upper"``: pass iff ``lhs <= rhs + tol`` with ``slack = rhs - lhs``.
    ``relation="lower"``: measured ``lhs`` must be at least the predicted
    ``rhs``; ``slack = lhs - rhs``.
    """

    name: str
    reference: str
    rhs: float
    lhs: float
    relation: str = "upper"
    tol: float = 1e-6
    constants: dict = field(default_factory=dict)
    seed: Optional[int] = None
    valid: bool = True
    status: Optional[str] = None
    notes: list = field(default_factory=list)

    @property
    def slack(self) -> float:
        a, b = (self.rhs, self.lhs) if self.relation == "upper" else (self.lhs, self.rhs)
        if np.isinf(a) and np.isinf(b) and a == b:
            return np.inf if a > 0 else 0.0
        return float(a - b)

    @property
    def verdict(self) -> bool:
        if not self.valid:
            return False
        if self.status is not None:
            return self.status == "pass"
        return bool(self.slack >= -self.tol)

    def to_dict(self) -> dict:
        return to_jsonable({
            "name": self.name, "reference": self.reference, "relation": self.relation,
            "rhs": self.rhs, "lhs": self.lhs, "slack": self.slack, "tol": self.tol,
            "verdict": self.verdict, "valid": self.valid, "status": self.status,
            "constants": self.constants, "seed": self.seed, "notes": list(self.notes),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_HEADER = ["name", "reference", "relation", "rhs", "lhs", "slack", "tol", "valid", "verdict", "seed"]

    def csv_row(self) -> list:
        d = self.to_dict()
        return [str(d[k]) if not isinstance(d[k], float) else repr(d[k]) for k in self.CSV_HEADER]


def certificates_csv(certs, quantity: str = "certificate") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(f"# quantity: {quantity}\n")
    w.writerow(BoundCertificate.CSV_HEADER)
    for c in certs:
        w.writerow(c.csv_row())
    return buf.getvalue()


def _guarded_ratio(num: float, den: float) -> tuple[float, bool]:
    if den < DIV_GUARD:
        return np.inf, True
    return num / den, False


def _escape_measure(problem, law, setup: LyapunovSetup, horizon: float, n_starts: int, seed: int):
    """Smallest simulated exit time from ``omega_delta`` over starts in ``omega``."""
    Y0 = setup.starts(n_starts, seed=seed)
    cfg = SimConfig(horizon=horizon, scheme="rk45", rtol=1e-9, atol=1e-11, escape=setup.omega_delta,
                    record=False)
    res = integrate_batch(problem, law, Y0, cfg)
    esc = res.status != COMPLETED
    if not esc.any():
        return np.inf, len(Y0), res
    return float(np.min(res.exit_time[esc])), len(Y0), res


def _escape_certificate(name, ref, predicted, vacuous, problem, law, setup, tau_max, n_starts, seed, consts):
    horizon = tau_max if not np.isfinite(predicted) else min(tau_max, predicted * (1 + 1e-6) + 1e-9)
    measured, n, res = _escape_measure(problem, law, setup, horizon, n_starts, seed)
    notes = []
    if vacuous:
        notes.append("denominator below guard: predicted bound is +inf, passes vacuously")
    if not np.isfinite(measured):
        notes.append(f"no escape observed within horizon {horizon:g}")
    if np.isfinite(predicted) and predicted > tau_max:
        notes.append(f"predicted bound exceeds tau_max={tau_max:g}: checked up to the cap")
    if np.any(res.status == "blew_up"):
        notes.append("blow-up observed")
    consts = {**consts, "n_starts": n, "horizon": horizon}
    cert = BoundCertificate(name, ref, predicted, measured, relation="lower", tol=1e-9 * max(1.0, predicted)
                            if np.isfinite(predicted) else 0.0, constants=consts, seed=seed, notes=notes)
    return cert


def escape_bound_a(setup: LyapunovSetup, problem: ControlProblem, law: Callable, law_phi: Callable,
                   n_points: int = 20000, n_starts: int = 256, tau_max: float = TAU_MAX,
                   seed: int = 0) -> BoundCertificate:
    """Escape-time lower bound for a Lipschitz law near a C1 supersolution's feedback."""
    P = setup.sample_delta(n_points, seed)
    Bdu = np.einsum("nij,nj->ni", problem.control_matrix(P), np.asarray(law(P)) - np.asarray(law_phi(P)))
    s = float(np.max(np.linalg.norm(Bdu, axis=1)))
    gw = setup.grad_w_sup(n_points, seed)
    gmax = float(np.max(setup.g_eval(P)))
    predicted, vac = _guarded_ratio(setup.delta, s * gw + gmax)
    consts = {"B_du_sup": s, "grad_w_sup": gw, "g_max": gmax, "delta": setup.delta, "n_points": n_points}
    return _escape_certificate("escape_a", "escape_time.c1", predicted, vac, problem, law, setup, tau_max,
                               n_starts, seed, consts)


def _bt_grad_sup(problem, grad, X) -> float:
    return float(np.max(np.linalg.norm(np.einsum("nij,ni->nj", problem.control_matrix(X), grad(X)), axis=1)))


def escape_bound_b(setup: LyapunovSetup, problem: ControlProblem, phi: ScalarField, eps: float,
                   n_points: int = 20000, n_starts: int = 256, tau_max: float = TAU_MAX, seed: int = 0,
                   sigma_kw: Optional[dict] = None) -> BoundCertificate:
    """Escape-time lower bound for the feedback of a mollified Lipschitz field."""
    from .synthesis import feedback_from

    field_eps = mollify(phi, eps)
    law = feedback_from(field_eps, problem)
    sq = sigma_quantities(setup, problem, eps, seed=seed, domain=phi.grid, **(sigma_kw or {}))
    P = setup.sample_delta(n_points, seed)
    nb = _bt_grad_sup(problem, phi.gradient, P)
    predicted, vac = _guarded_ratio(setup.delta, sq.sigma1 + sq.sigma2 * nb / problem.beta)
    consts = {"eps": eps, "sigma1": sq.sigma1, "sigma2": sq.sigma2, "Bt_grad_phi_sup": nb,
              "delta": setup.delta, **{f"sigma.{k}": v for k, v in sq.constants.items()}}
    return _escape_certificate("escape_b", "escape_time.lipschitz", predicted, vac, problem, law, setup,
                               tau_max, n_starts, seed, consts)


def escape_bound_c(setup: LyapunovSetup, problem: ControlProblem, phi: ScalarField, eps: float, lam: float,
                   n_points: int = 20000, n_starts: int = 256, tau_max: float = TAU_MAX, seed: int = 0,
                   rate: Optional[tuple] = None, bound: str = "local", moreau: Optional[MoreauField] = None,
                   sigma_kw: Optional[dict] = None) -> BoundCertificate:
    """Escape-time lower bound for the feedback of a mollified Moreau envelope.

    ``rate=(C, alpha, sigma)`` adds the rate columns of ``|g_lam - g|``.
    """
    from .synthesis import feedback_from

    try:
        M = moreau if moreau is not None else moreau_envelope(phi, lam, bound=bound)
    except DomainError:
        M = None
    notes = []
    if M is None or not M.inner.contains_region(setup.omega_delta, pad=eps, seed=seed):
        cert = BoundCertificate("escape_c", "escape_time.continuous", np.nan, np.nan, relation="lower",
                                constants={"eps": eps, "lambda": lam}, seed=seed, valid=False,
                                notes=["omega_delta + B(0,eps) not inside the Moreau inner domain"])
        return cert
    field_el = mollify(M, eps)
    law = feedback_from(field_el, problem)
    sq = sigma_quantities(setup, problem, eps, moreau=M, seed=seed, **(sigma_kw or {}))
    P = setup.sample_delta(n_points, seed)
    nb = _bt_grad_sup(problem, M.values.gradient, P)
    predicted, vac = _guarded_ratio(setup.delta, sq.sigma1_lambda + sq.sigma2 * nb / problem.beta)
    consts = {"eps": eps, "lambda": lam, "sigma1_lambda": sq.sigma1_lambda, "sigma2": sq.sigma2,
              "Bt_grad_moreau_sup": nb, "delta": setup.delta,
              **{f"sigma.{k}": v for k, v in sq.constants.items()}}
    if rate is not None:
        C, a, s = rate
        consts.update({"rate.lam^(s/(2-a))": lam ** (s / (2 - a)),
                       "rate.lam^((s+a-1)/(2-a))": lam ** ((s + a - 1) / (2 - a)),
                       "rate.lam^(2/(2-a))": lam ** (2 / (2 - a)),
                       "rate.lam^(a/(2-a))": lam ** (a / (2 - a)), "rate.C": C})
    cert = _escape_certificate("escape_c", "escape_time.continuous", predicted, vac, problem, law, setup,
                               tau_max, n_starts, seed, consts)
    cert.notes.extend(notes)
    return cert


# ---------------------------------------------------------------------------
# value-error certificates


def _start_points(omega, n: int, seed: int) -> np.ndarray:
    if isinstance(omega, RegionSample):
        return omega.points
    return omega.sample(n, make_rng(seed, 71))


def _grad_of(v):
    return v.gradient if hasattr(v, "gradient") else v


def _value_of(v):
    return v.eval if hasattr(v, "eval") else v


def _sim(T: float, escape: Region) -> SimConfig:
    return SimConfig(horizon=T, scheme="rk45", rtol=1e-10, atol=1e-12, escape=escape, record=False)


def certify_linfty(problem: ControlProblem, v, law: Callable, T: float, omega, Omega: Region,
                   g: Optional[Callable] = None, n_starts: int = 400, n_sup: int = 20000, seed: int = 0,
                   tol: float = 1e-6) -> BoundCertificate:
    """Uniform bound on ``V_{law,T} + v(y(T)) - v`` for a C1 supersolution ``v``."""
    from .synthesis import feedback_from

    Y0 = _start_points(omega, n_starts, seed)
    res = cost_value(problem, law, Y0, _sim(T, Omega))
    vf = _value_of(v)
    ok = res.status == COMPLETED
    lhs = float(np.max(res.cost[ok] + vf(res.final[ok]) - vf(Y0[ok]))) if ok.any() else np.nan
    Z = Omega.sample(n_sup, make_rng(seed, 73))
    g_sup = float(np.max(np.maximum(g(Z), 0.0))) if g is not None else 0.0
    du = np.asarray(law(Z)) - np.asarray(feedback_from(v, problem)(Z))
    du2 = float(np.max(np.sum(du * du, axis=1)))
    rhs = T * (g_sup + problem.beta * du2)
    cert = BoundCertificate("linfty", "error.c1_supersolution", rhs, lhs, tol=tol,
                            constants={"T": T, "g_sup": g_sup, "du_sup_sq": du2, "beta": problem.beta,
                                       "n_starts": len(Y0), "n_sup": n_sup}, seed=seed)
    if not ok.all():
        cert.valid = False
        i = int(np.flatnonzero(~ok)[0])
        cert.notes.append(f"{int((~ok).sum())} trajectories left Omega before T (first at t={res.exit_time[i]:.4g}, "
                          f"y0={Y0[i].tolist()}): {res.diagnostics[i]}")
    return cert


def consistent_gradient_mask(field: ScalarField, factor: float = 10.0) -> np.ndarray:
    """Nodes whose one-sided differences agree within ``factor * h`` on every axis."""
    v = field.values
    h = field.grid.spacing
    ok = np.ones(v.shape, dtype=bool)
    for a in range(field.dim):
        dv = np.diff(v, axis=a) / h[a]
        sl_lo = [slice(None)] * field.dim
        sl_hi = [slice(None)] * field.dim
        sl_lo[a] = slice(0, -1)
        sl_hi[a] = slice(1, None)
        jump = np.zeros(v.shape)
        inner = [slice(None)] * field.dim
        inner[a] = slice(1, -1)
        jump[tuple(inner)] = np.abs(dv[tuple(sl_hi)] - dv[tuple(sl_lo)])
        ok &= jump <= factor * h[a]
    return ok.ravel()


def law_jacobian(law: Callable, X, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian ``(n, m, d)`` of a feedback law."""
    X = np.atleast_2d(X)
    cols = []
    for a in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[a] = step
        cols.append((np.asarray(law(X + e)) - np.asarray(law(X - e))) / (2 * step))
    return np.stack(cols, axis=2)


def divergence_bound(problem: ControlProblem, law: Callable, X, step: float = 1e-5) -> float:
    """``sup -tr(B Du)`` over the points ``X``."""
    J = law_jacobian(law, X, step)
    tr = np.einsum("nij,nji->n", problem.control_matrix(X), J)
    return float(np.max(-tr))


def _k_constant(problem, law, X, C: float, region, seed: int) -> tuple[float, dict]:
    d, m = problem.dim, problem.ctrl_dim
    f_lip = lipschitz_estimate(problem.drift, region, seed=seed)
    B_lip = matrix_lipschitz(problem.B, region, seed=seed)[0]
    u_inf = float(np.max(np.abs(np.asarray(law(X)))))
    K = C + d * f_lip + d * m * B_lip * u_inf
    return K, {"C": C, "f_lip": f_lip, "B_lip": B_lip, "u_linf": u_inf, "K": K}


def _growth(K: float, T: float) -> float:
    """``(e^{KT} - 1) / K`` with its limit ``T`` at ``K = 0``."""
    if abs(K) * T < 1e-12:
        return T
    return float(np.expm1(K * T) / K)


def certify_lp(problem: ControlProblem, v: ScalarField, law: Callable, T: float, omega: Region,
               Omega1: Region, p: float, g: Optional[Callable] = None, grid: Optional[BoxGrid] = None,
               C: Optional[float] = None, seed: int = 0, tol: float = 1e-6) -> BoundCertificate:
    """``L^p`` bound on the positive part of ``V_{law,T} + v(y(T)) - v`` for a Lipschitz supersolution.

    Integrals use the grid quadrature of ``v``'s grid (or ``grid``).
    """
    return certify_lp_sweep(problem, v, law, T, omega, Omega1, [p], g, grid, C, seed, tol)[0]


def certify_lp_sweep(problem: ControlProblem, v: ScalarField, law: Callable, T: float, omega: Region,
                     Omega1: Region, ps, g: Optional[Callable] = None, grid: Optional[BoxGrid] = None,
                     C: Optional[float] = None, seed: int = 0, tol: float = 1e-6) -> list:
    """:func:`certify_lp` for several exponents sharing one flow integration."""
    ps = [float(p) for p in ps]
    for p in ps:
        if not np.isfinite(p) or p < 1:
            raise ValidationError("p", f"must be >= 1, got {p}")
    grid = grid if grid is not None else v.grid
    nodes = grid.nodes()
    cell = float(np.prod(grid.spacing))
    Y0 = nodes[omega.contains(nodes)]
    res = cost_value(problem, law, Y0, _sim(T, Omega1))
    ok = res.status == COMPLETED
    vf = _value_of(v)
    defect = np.zeros(len(Y0))
    defect[ok] = res.cost[ok] + vf(res.final[ok]) - vf(Y0[ok])

    in1 = Omega1.contains(nodes)
    X1 = nodes[in1]
    notes = ["boundary regularity of Omega1 is not verified"]
    if isinstance(v, ScalarField) and v.grid == grid:
        mask = consistent_gradient_mask(v)[in1]
        P = v.nodal_gradient().reshape(-1, v.dim)[in1]
        if (~mask).any():
            notes.append(f"{int((~mask).sum())} of {len(mask)} nodes excluded (inconsistent one-sided differences)")
        X1m, P = X1[mask], P[mask]
    else:
        X1m = X1
        P = np.asarray(_grad_of(v)(X1))
    u_v = -np.einsum("nij,ni->nj", problem.control_matrix(X1m), P) / problem.beta
    du = np.asarray(law(X1m)) - u_v
    du2 = np.sum(du * du, axis=1)
    C_meas = divergence_bound(problem, law, X1) if C is None else float(C)
    K, kc = _k_constant(problem, law, X1, C_meas, Omega1, seed)
    g_sup = float(np.max(np.abs(g(X1)))) if g is not None else 0.0
    vol = omega.volume()
    growth = _growth(K, T)
    certs = []
    for p in ps:
        lhs = float((cell * np.sum(np.maximum(defect, 0.0) ** p)) ** (1.0 / p))
        norm2p = float((cell * np.sum(du2**p)) ** (1.0 / (2 * p)))
        rhs = T * vol ** (1.0 / p) * g_sup + T ** ((p - 1.0) / p) * problem.beta * growth ** (1.0 / p) * norm2p**2
        consts = {"T": T, "p": p, "omega_volume": vol, "g_sup": g_sup, "du_L2p": norm2p, "growth": growth,
                  "n_quadrature": len(Y0), "cell": cell, **kc,
                  "C_source": "supplied" if C is not None else "sampled"}
        cert = BoundCertificate("lp", "error.lipschitz_supersolution", rhs, lhs, tol=tol, constants=consts,
                                seed=seed, notes=list(notes))
        if not ok.all():
            cert.valid = False
            cert.notes.append(f"{int((~ok).sum())} trajectories left Omega1 before T")
        certs.append(cert)
    return certs


def jacobian_volume_check(problem: ControlProblem, law: Callable, omega: Region, Omega1: Region, T: float,
                          phi: Callable, samples: int = 10000, seed: int = 0, C: Optional[float] = None,
                          n_div: int = 4000, integral_samples: Optional[int] = None) -> BoundCertificate:
    """Monte Carlo check of the change-of-variables bound for time integrals along the flow.

    Verdict ``pass`` needs the margin ``rhs - lhs`` to exceed three combined
    standard errors, ``fail`` needs it below minus three, else ``inconclusive``.
    ``samples`` trajectories estimate the flow integral. The integral of
    ``phi`` over ``Omega1`` needs no integration, so it uses
    ``integral_samples`` points (default ``20 * samples``).
    """
    rng = make_rng(seed, 79)
    Y0 = omega.sample(samples, rng)
    cfg = SimConfig(horizon=T, scheme="rk45", rtol=1e-9, atol=1e-11, escape=Omega1, record=False)
    res = integrate_batch(problem, law, Y0, cfg, extra=lambda Y, U: np.asarray(phi(Y)).reshape(-1, 1), n_extra=1)
    ok = res.status == COMPLETED
    vol_w = omega.volume()
    vals = res.extra[:, 0]
    lhs = vol_w * float(np.mean(vals))
    se_l = vol_w * float(np.std(vals, ddof=1)) / np.sqrt(samples)
    lo, hi = (np.asarray(b) for b in Omega1.bbox)
    n_int = 20 * samples if integral_samples is None else int(integral_samples)
    Z = rng.uniform(lo, hi, size=(n_int, len(lo)))
    inside = Omega1.contains(Z)
    fz = np.zeros(n_int)
    fz[inside] = np.asarray(phi(Z[inside])).reshape(-1)
    box = float(np.prod(hi - lo))
    integral = box * float(np.mean(fz))
    se_i = box * float(np.std(fz, ddof=1)) / np.sqrt(n_int)
    Xd = Omega1.sample(n_div, make_rng(seed, 83))
    C_meas = divergence_bound(problem, law, Xd) if C is None else float(C)
    K, kc = _k_constant(problem, law, Xd, C_meas, Omega1, seed)
    growth = _growth(K, T)
    rhs = growth * integral
    sigma = float(np.hypot(se_l, growth * se_i))
    margin = rhs - lhs
    status = "pass" if margin >= 3 * sigma else ("fail" if margin < -3 * sigma else "inconclusive")
    consts = {"T": T, "samples": samples, "integral_samples": n_int, "omega_volume": vol_w, "integral_Omega1": integral,
              "se_lhs": se_l, "se_integral": se_i, "sigma": sigma, "growth": growth, **kc,
              "C_source": "supplied" if C is not None else "sampled"}
    cert = BoundCertificate("jacobian_volume", "flow_integral", rhs, lhs, tol=0.0, constants=consts,
                            seed=seed, status=status)
    if status == "inconclusive":
        cert.notes.append("Monte Carlo variance too high for a 3-sigma verdict")
    if not ok.all():
        cert.valid = False
        cert.notes.append(f"{int((~ok).sum())} trajectories left Omega1 before T")
    return cert


# ---------------------------------------------------------------------------
# trajectory convergence


@dataclass
class ConvergenceReport:
    mode: str
    params: list
    horizons: list
    distances: list
    cost_gaps: list
    distance_decreasing: Optional[bool]
    cost_decreasing: bool
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return to_jsonable(self.__dict__)


def _nonincreasing(x, floor: float) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(np.diff(x) <= floor))


def trajectory_convergence_check(problem: ControlProblem, laws: dict, y0, value: Callable,
                                 reference: Optional[Callable] = None, unique: bool = True,
                                 T_check: Optional[float] = None, floor: float = 1e-9) -> ConvergenceReport:
    """Distances to a reference optimal trajectory and value gaps along a sweep.

    ``laws`` maps the regularization parameter to ``(law, T)``; parameters
    are processed in decreasing order. ``value`` evaluates ``V``.
    """
    y0 = np.asarray(y0, dtype=float)
    params = sorted(laws, reverse=True)
    notes = []
    mode = "full" if (unique and reference is not None) else "cost-only"
    if mode == "cost-only":
        notes.append("reference optimum not unique at y0: trajectory distances skipped" if not unique
                     else "no reference trajectory supplied")
    v0 = float(np.asarray(value(y0[None]))[0])
    tc = min(laws[prm][1] for prm in params) if T_check is None else T_check
    dists, gaps, horizons = [], [], []
    for prm in params:
        law, T = laws[prm]
        tr = integrate_closed_loop(problem, law, y0, SimConfig(horizon=T, scheme="rk45", rtol=1e-10, atol=1e-12))
        horizons.append(T)
        if tr.status != COMPLETED:
            notes.append(f"param {prm:g}: trajectory {tr.status} at t={tr.exit_time}")
        gaps.append(abs(tr.cost + float(np.asarray(value(tr.final_state[None]))[0]) - v0))
        if mode == "full":
            sel = tr.t <= tc + 1e-12
            ref = np.asarray(reference(tr.t[sel]))
            dists.append(float(np.max(np.linalg.norm(tr.y[sel] - ref, axis=1))))
    return ConvergenceReport(mode, params, horizons, dists, gaps,
                             _nonincreasing(dists, floor) if mode == "full" else None,
                             _nonincreasing(gaps, floor), notes)
