"""Feedback laws from value surrogates and the four convergence pipelines.

Each pipeline sweeps a regularization parameter, builds a smooth surrogate
of the value function, derives the feedback law ``-B^T grad v / beta`` and
selects a horizon from the escape-time bound and a schedule ``kappa``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (BoxGrid, ControlProblem, DomainError, ScalarField, ValidationError, lipschitz_estimate,
                   make_rng, matrix_lipschitz, to_jsonable)
from .regularize import MoreauField, moreau_envelope, mollify, semiconcavity_constant
from .simulate import COMPLETED, SimConfig, cost_value, optimal_control

logger = logging.getLogger(__name__)

TAU_MAX = 50.0


class PlanError(ValidationError):
    """A pipeline's hypothesis fails for a swept parameter."""


# ---------------------------------------------------------------------------
# feedback laws


class AnalyticValue:
    """Closed-form value surrogate with its gradient."""

    def __init__(self, fn: Callable, grad: Callable, name: str = "analytic"):
        self.fn = fn
        self.grad = grad
        self.name = name

    def eval(self, x):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.fn(X), dtype=float).reshape(len(X))
        return out[0] if np.ndim(x) == 1 else out

    __call__ = eval

    def gradient(self, x):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.grad(X), dtype=float).reshape(X.shape)
        return out[0] if np.ndim(x) == 1 else out


class FeedbackLaw:
    """Feedback ``u(y)``: either ``-B(y)^T grad v(y) / beta`` or an explicit map.

    ``domain`` (a grid or region) is where the law may be queried; queries
    outside raise ``DomainError``.
    """

    def __init__(self, problem: ControlProblem, grad: Optional[Callable] = None, fn: Optional[Callable] = None,
                 domain=None, name: str = "law", meta: Optional[dict] = None):
        if (grad is None) == (fn is None):
            raise ValueError("exactly one of grad and fn is required")
        self.problem = problem
        self.grad = grad
        self.fn = fn
        self.domain = domain
        self.name = name
        self.meta = dict(meta or {})

    @property
    def kind(self) -> str:
        if self.fn is not None:
            return "analytic"
        return "field" if self.domain is not None else "analytic_gradient"

    def valid(self, Y) -> np.ndarray:
        Y = np.atleast_2d(Y)
        if self.domain is None:
            return np.ones(len(Y), dtype=bool)
        return np.asarray(self.domain.contains(Y), dtype=bool)

    def __call__(self, y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.domain is not None and not np.all(self.valid(Y)):
            raise DomainError(f"{self.name}: query outside the surrogate's valid region")
        if self.fn is not None:
            U = np.asarray(self.fn(Y), dtype=float).reshape(len(Y), self.problem.ctrl_dim)
        else:
            U = optimal_control(self.problem, Y, np.asarray(self.grad(Y)).reshape(Y.shape))
        return U[0] if np.ndim(y) == 1 else U


def feedback_from(v, problem: ControlProblem, name: Optional[str] = None) -> FeedbackLaw:
    """Feedback law of a value surrogate (field, Moreau field or analytic value)."""
    if isinstance(v, MoreauField):
        return FeedbackLaw(problem, grad=v.values.gradient, domain=v.grid, name=name or f"u[{v.values.name}]",
                           meta={"lambda": v.lam})
    if isinstance(v, ScalarField):
        meta = {"eps": v.eps} if hasattr(v, "eps") else {}
        return FeedbackLaw(problem, grad=v.gradient, domain=v.grid, name=name or f"u[{v.name}]", meta=meta)
    if hasattr(v, "gradient"):
        return FeedbackLaw(problem, grad=v.gradient, name=name or f"u[{getattr(v, 'name', 'v')}]")
    if callable(v):
        return FeedbackLaw(problem, grad=v, name=name or "u[grad]")
    raise ValidationError("v", f"cannot build a feedback law from {type(v).__name__}")


def law_from_map(fn: Callable, problem: ControlProblem, name: str = "map") -> FeedbackLaw:
    """Wrap an explicit control map ``y -> u``."""
    return FeedbackLaw(problem, fn=fn, name=name)


# ---------------------------------------------------------------------------
# horizon schedules


@dataclass(frozen=True)
class KappaSchedule:
    """``log(a)``: ``s -> -ln(s)/a``; ``power(q)``: ``s -> s^-q``; capped at ``tau_max``."""

    form: str
    param: float
    tau_max: float = TAU_MAX

    def __post_init__(self):
        if self.form not in ("log", "power"):
            raise ValidationError("kappa.form", f"unknown form {self.form!r}")
        if not np.isfinite(self.param) or self.param <= 0:
            raise ValidationError("kappa.param", f"must be positive, got {self.param}")
        if not self.tau_max > 0:
            raise ValidationError("kappa.tau_max", "must be positive")

    def raw(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            if self.form == "log":
                out = np.where(s > 0, -np.log(np.where(s > 0, s, 1.0)) / self.param, np.inf)
            else:
                out = np.where(s > 0, np.where(s > 0, s, 1.0) ** (-self.param), np.inf)
        return out

    def __call__(self, s):
        out = np.minimum(self.raw(s), self.tau_max)
        return float(out) if np.ndim(out) == 0 else out

    def capped(self, s) -> bool:
        return bool(self.raw(s) >= self.tau_max)

    def to_dict(self) -> dict:
        return {"form": self.form, "param": self.param, "tau_max": self.tau_max}


SWEEP = np.logspace(-1, -4, 13)


def semiconcave_tail(kappa: KappaSchedule, K: float, p: float, s=SWEEP) -> np.ndarray:
    """``log( kappa^{(p-1)/p} (e^{K kappa} - 1)^{1/p} s^2 )`` on ``s`` (uncapped kappa)."""
    k = kappa.raw(s)
    return (p - 1) / p * np.log(k) + _log_expm1(K * k) / p + 2 * np.log(s)


def hoelder_tail(kappa: KappaSchedule, K_of_s: Callable, eta: Callable, p: float, alpha: float,
                 s=SWEEP) -> np.ndarray:
    """``log`` of the Hoelder pipeline's tail product on ``s``."""
    k = kappa.raw(s)
    with np.errstate(divide="ignore"):
        a = (p - 1) / p * np.log(k) + _log_expm1(K_of_s(s) * k) / p + np.log(eta(s))
    b = np.log(k) + (2 * alpha - 1) / (2 - alpha) * np.log(s)
    return np.logaddexp(a, b)


def _log_expm1(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(x > 30, x + np.log1p(-np.exp(-np.minimum(x, 700))), np.log(np.expm1(np.maximum(x, 0.0))))


def _decreasing(vals) -> bool:
    vals = np.asarray(vals)
    return bool(np.all(np.isfinite(vals)) and np.all(np.diff(vals) < 0))


# ---------------------------------------------------------------------------
# plans


@dataclass
class PlanEntry:
    """One swept parameter: surrogate, law, horizon and diagnostics."""

    param: float
    eps: Optional[float] = None
    lam: Optional[float] = None
    s: Optional[float] = None
    tau: Optional[float] = None
    tau_branch: Optional[str] = None
    K: Optional[float] = None
    predicted_bound: Optional[float] = None
    sigma: dict = field(default_factory=dict)
    accepted: bool = True
    reason: str = ""
    extra: dict = field(default_factory=dict)
    law: Optional[FeedbackLaw] = field(default=None, repr=False)
    surrogate: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("law", "surrogate")}
        return to_jsonable(d)


@dataclass
class SynthesisPlan:
    pipeline: str
    param_name: str
    kappa: KappaSchedule
    delta: float
    entries: list = field(default_factory=list)
    constants: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def accepted(self) -> list:
        return [e for e in self.entries if e.accepted]

    def taus(self) -> np.ndarray:
        return np.array([e.tau for e in self.accepted()])

    def check_invariants(self) -> None:
        """Finite positive horizons, nondecreasing as the parameter decreases."""
        acc = sorted(self.accepted(), key=lambda e: -e.param)
        for e in acc:
            if e.tau is None or not np.isfinite(e.tau) or e.tau <= 0:
                raise PlanError(f"{self.param_name}={e.param:g}", f"horizon {e.tau} is not finite and positive")
        taus = [e.tau for e in acc]
        if np.any(np.diff(taus) < -1e-12 * max(taus, default=1.0)):
            raise PlanError(self.param_name, f"horizons not nondecreasing as the parameter decreases: {taus}")

    def to_dict(self) -> dict:
        return to_jsonable({
            "pipeline": self.pipeline, "parameter": self.param_name, "kappa": self.kappa.to_dict(),
            "delta": self.delta, "constants": self.constants, "notes": list(self.notes),
            "entries": [e.to_dict() for e in self.entries],
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_valid(law: FeedbackLaw, pts, label: str) -> None:
    if not np.all(law.valid(pts)):
        raise PlanError(label, "surrogate valid region does not contain omega_delta")


def _escape_tau(delta: float, denom: float) -> float:
    return np.inf if denom < 1e-14 else delta / denom


def _choose_tau(tau_esc: float, tau_kappa: float, tau_max: float) -> tuple[float, str]:
    tau = min(tau_esc, tau_kappa, tau_max)
    if tau == tau_max and tau_max <= min(tau_esc, tau_kappa):
        return tau, "cap"
    return tau, "escape" if tau_esc <= tau_kappa else "kappa"


def plan_c1(problem: ControlProblem, V, setup, u_family: dict, kappa: KappaSchedule, n_points: int = 4000,
            seed: int = 0) -> SynthesisPlan:
    """Pipeline for a C1 value function: horizons from the feedback deviation."""
    pts = setup.sample_delta(n_points, seed)
    uV = feedback_from(V, problem)
    gw = setup.grad_w_sup(n_points, seed)
    bound = setup.delta / gw if gw > 0 else np.inf
    plan = SynthesisPlan("c1", "eps", kappa, setup.delta, constants={"grad_w_sup": gw, "side_bound": bound,
                                                                      "n_points": n_points})
    base = uV(pts)
    for eps in sorted(u_family, reverse=True):
        law = u_family[eps]
        _check_valid(law, pts, f"eps={eps:g}")
        du = np.asarray(law(pts)) - base
        s = float(np.max(np.linalg.norm(np.einsum("nij,nj->ni", problem.control_matrix(pts), du), axis=1)))
        su = float(np.max(np.linalg.norm(du, axis=1)))
        raw = float(kappa.raw(s))
        if s > 0 and raw * s > bound:
            raise PlanError(f"eps={eps:g}", f"kappa(s) s = {raw * s:.4g} exceeds delta/||grad w|| = {bound:.4g}")
        tau = kappa(s)
        if not tau > 0:
            raise PlanError(f"eps={eps:g}", f"kappa({s:.3g}) = {tau:.3g} is not positive")
        branch = "cap" if kappa.capped(s) else "kappa"
        plan.entries.append(PlanEntry(eps, eps=eps, s=s, tau=tau, tau_branch=branch,
                                      predicted_bound=problem.beta * tau * su**2, law=law,
                                      extra={"u_dev_sup": su}))
    return plan


def _gap_sup(a: Callable, b: Callable, pts, power: Optional[float] = None, cell: Optional[float] = None) -> float:
    d = np.linalg.norm(np.asarray(a(pts)) - np.asarray(b(pts)), axis=1)
    if power is None:
        return float(np.max(d) ** 2)
    return float((cell * np.sum(d ** (2 * power))) ** (1.0 / power))


def _moreau_out_grid(V: ScalarField, setup, pad: float) -> BoxGrid:
    lo, hi = (np.asarray(b, dtype=float) for b in setup.omega_delta.bbox)
    return V.grid.covering(lo - pad, hi + pad)


def _eps_grid(hi: float, lo: float, ratio: float = 2 ** -0.25) -> np.ndarray:
    if hi < lo:
        return np.empty(0)
    n = int(np.floor(np.log(lo / hi) / np.log(ratio) + 1e-9)) + 1
    return hi * ratio ** np.arange(n)


def _largest_feasible(cands, feasible: Callable):
    """Bisection for the largest feasible entry of a decreasing candidate list.

    Feasibility is assumed monotone (infeasible for large, feasible for small).
    """
    if len(cands) == 0:
        return None, None
    lo_ok = feasible(cands[-1])
    if not lo_ok[0]:
        return None, lo_ok[1]
    first = feasible(cands[0])
    if first[0]:
        return cands[0], first[1]
    i_bad, i_ok = 0, len(cands) - 1
    info = lo_ok[1]
    while i_ok - i_bad > 1:
        mid = (i_bad + i_ok) // 2
        ok, inf = feasible(cands[mid])
        if ok:
            i_ok, info = mid, inf
        else:
            i_bad = mid
    return cands[i_ok], info


def plan_semiconvex(problem: ControlProblem, V: ScalarField, setup, lambdas, kappa: KappaSchedule,
                    eps_max: float = 1.0, bound: str = "local", n_points: int = 2000, seed: int = 0,
                    sigma_kw: Optional[dict] = None) -> SynthesisPlan:
    """Pipeline for a semi-convex value function via mollified Moreau envelopes.

    ``eps(lambda)`` is the largest feasible radius on a geometric grid in
    ``[2h, min(eps_max, lambda)]``; the upper cap ``lambda`` keeps the
    escape-branch horizon increasing along the sweep.
    """
    from .certify import sigma_quantities

    h = float(V.grid.spacing.max())
    pts = setup.sample_delta(n_points, seed)
    plan = SynthesisPlan("semiconvex", "lambda", kappa, setup.delta, constants={"bound": bound, "h": h})
    lam0 = None
    for lam in sorted(lambdas, reverse=True):
        entry = PlanEntry(lam, lam=lam)
        plan.entries.append(entry)
        try:
            M = moreau_envelope(V, lam, out_grid=_moreau_out_grid(V, setup, eps_max + 2 * h), bound=bound)
        except DomainError as exc:
            entry.accepted, entry.reason = False, str(exc)
            continue
        if not M.inner.contains_region(setup.omega_delta, seed=seed):
            entry.accepted, entry.reason = False, "omega_delta not inside the Moreau inner domain"
            continue
        grad_M = M.values.gradient

        def feasible(eps):
            if not M.inner.contains_region(setup.omega_delta, pad=eps, seed=seed):
                return False, None
            try:
                Ve = mollify(M, eps)
                gap = _gap_sup(Ve.gradient, grad_M, pts)
            except (DomainError, ValidationError):
                return False, None
            return gap <= lam, (Ve, gap)

        eps, info = _largest_feasible(_eps_grid(min(eps_max, lam), 2 * h), feasible)
        if eps is None:
            entry.accepted, entry.reason = False, "no eps satisfies the inclusion and gradient-gap conditions"
            continue
        Ve, gap = info
        law = feedback_from(Ve, problem)
        _check_valid(law, pts, f"lambda={lam:g}")
        sq = sigma_quantities(setup, problem, eps, moreau=M, seed=seed, **(sigma_kw or {}))
        nb = float(np.max(np.linalg.norm(np.einsum("nij,ni->nj", problem.control_matrix(pts), grad_M(pts)), axis=1)))
        tau_esc = _escape_tau(setup.delta, sq.sigma1_lambda + sq.sigma2 * nb / problem.beta)
        tau, branch = _choose_tau(tau_esc, float(kappa.raw(lam)), kappa.tau_max)
        entry.eps, entry.tau, entry.tau_branch = eps, tau, branch
        entry.sigma = sq.to_dict()
        entry.extra = {"gradient_gap_sq": gap, "Bt_grad_moreau_sup": nb, "tau_escape": tau_esc}
        entry.law, entry.surrogate = law, Ve
        lam0 = lam if lam0 is None else max(lam0, lam)
    plan.constants["lambda0"] = lam0
    return plan


def plan_semiconcave(problem: ControlProblem, V: ScalarField, setup, eps_list, kappa: KappaSchedule, p: float,
                     n_points: int = 4000, seed: int = 0, sigma_kw: Optional[dict] = None) -> SynthesisPlan:
    """Pipeline for a semi-concave value function via mollification.

    The Lipschitz norm of ``grad V`` in ``K`` is taken as the semi-concavity
    constant ``C``.
    """
    from .certify import consistent_gradient_mask, sigma_quantities

    if not np.isfinite(p) or p < 1:
        raise ValidationError("p", f"must be >= 1, got {p}")
    d, m = problem.dim, problem.ctrl_dim
    nodes = V.grid.nodes()
    ind = setup.omega_delta.contains(nodes)
    C = semiconcavity_constant(V, setup.omega_delta)
    pts = setup.sample_delta(n_points, seed)
    B_sup = float(np.max(np.linalg.norm(problem.control_matrix(pts), ord=2, axis=(1, 2))))
    B_lip = matrix_lipschitz(problem.B, setup.omega_delta, seed=seed)[0]
    f_lip = lipschitz_estimate(problem.drift, setup.omega_delta, seed=seed)
    gradV = V.nodal_gradient().reshape(-1, d)
    gV_sup = float(np.max(np.linalg.norm(gradV[ind], axis=1)))
    K = (m * d * C * B_sup**2 + m * d**2 * B_lip**2 * C) / problem.beta + d * f_lip
    tail = semiconcave_tail(kappa, K, p)
    plan = SynthesisPlan("semiconcave", "eps", kappa, setup.delta,
                         constants={"C": C, "K": K, "B_sup": B_sup, "B_lip": B_lip, "f_lip": f_lip,
                                    "grad_V_sup": gV_sup, "p": p, "tail_log": tail.tolist(),
                                    "grad_V_lip_source": "semiconcavity constant"})
    if not _decreasing(tail):
        raise PlanError("kappa", f"tail product not decreasing on the s-sweep (K={K:.4g}, p={p:g})")
    mask = consistent_gradient_mask(V)
    sel = ind & mask
    if (ind & ~mask).any():
        plan.notes.append(f"{int((ind & ~mask).sum())} of {int(ind.sum())} nodes in omega_delta excluded "
                          "from deviation integrals")
    X = nodes[sel]
    uV = -np.einsum("nij,ni->nj", problem.control_matrix(X), gradV[sel]) / problem.beta
    cell = float(np.prod(V.grid.spacing))
    for eps in sorted(eps_list, reverse=True):
        Ve = mollify(V, eps)
        law = feedback_from(Ve, problem)
        _check_valid(law, pts, f"eps={eps:g}")
        dev = np.linalg.norm(np.asarray(law(X)) - uV, axis=1)
        s = float((cell * np.sum(dev**p)) ** (1.0 / p))
        s2p = float((cell * np.sum(dev ** (2 * p))) ** (1.0 / (2 * p)))
        sq = sigma_quantities(setup, problem, eps, seed=seed, domain=V.grid, **(sigma_kw or {}))
        tau_esc = _escape_tau(setup.delta, sq.sigma1 + sq.sigma2 * gV_sup / problem.beta)
        tau, branch = _choose_tau(tau_esc, float(kappa.raw(s)), kappa.tau_max)
        growth = tau if abs(K) * tau < 1e-12 else float(np.expm1(K * tau) / K)
        pred = tau ** ((p - 1) / p) * problem.beta * growth ** (1 / p) * s2p**2
        plan.entries.append(PlanEntry(eps, eps=eps, s=s, tau=tau, tau_branch=branch, K=K, predicted_bound=pred,
                                      sigma=sq.to_dict(), law=law, surrogate=Ve,
                                      extra={"u_dev_L2p": s2p, "tau_escape": tau_esc}))
    return plan


def remark_eta(K_of_s: Callable, kappa: KappaSchedule, p: float) -> Callable:
    """``eta(s) = exp(-K(s) kappa(s) / p - 1/s^2)``."""
    def eta(s):
        s = np.asarray(s, dtype=float)
        return np.exp(-K_of_s(s) * kappa.raw(s) / p - 1.0 / s**2)
    return eta


def plan_hoelder(problem: ControlProblem, V: ScalarField, setup, lambdas, kappa: KappaSchedule, p: float,
                 alpha: float = 1.0, eta: Optional[Callable] = None, bound: str = "local", n_points: int = 2000,
                 seed: int = 0, sigma_kw: Optional[dict] = None) -> SynthesisPlan:
    """Pipeline for a Hoelder value function via mollified Moreau envelopes."""
    from .certify import sigma_quantities

    if not (0.5 < alpha <= 1.0):
        raise PlanError("alpha", f"Hoelder exponent must lie in (1/2, 1], got {alpha}")
    if not np.isfinite(p) or p < 1:
        raise ValidationError("p", f"must be >= 1, got {p}")
    d, m = problem.dim, problem.ctrl_dim
    B_lip = matrix_lipschitz(problem.B, setup.omega_delta, seed=seed)[0]
    f_lip = lipschitz_estimate(problem.drift, setup.omega_delta, seed=seed)

    def K_of_s(s):
        return m * d * (d + 1) / (problem.beta * np.asarray(s, dtype=float)) * B_lip**2 + d * f_lip

    eta = eta if eta is not None else remark_eta(K_of_s, kappa, p)
    q_max = (2 * alpha - 1) / (2 - alpha)
    tail = hoelder_tail(kappa, K_of_s, eta, p, alpha)
    plan = SynthesisPlan("hoelder", "lambda", kappa, setup.delta,
                         constants={"alpha": alpha, "p": p, "B_lip": B_lip, "f_lip": f_lip, "q_max": q_max,
                                    "tail_log": tail.tolist(), "bound": bound})
    if kappa.form == "power" and not (0 < kappa.param < q_max):
        plan.notes.append(f"power q={kappa.param:g} outside (0, {q_max:.4g})")
    if not _decreasing(tail):
        raise PlanError("kappa", "tail product not decreasing on the s-sweep")
    h = float(V.grid.spacing.max())
    pts = setup.sample_delta(n_points, seed)
    cell_pts = setup.omega_delta.volume() / len(pts)
    e_hi = max(lambdas) ** (1.0 / (2 - alpha))
    for lam in sorted(lambdas, reverse=True):
        entry = PlanEntry(lam, lam=lam, K=float(K_of_s(lam)))
        plan.entries.append(entry)
        cap = lam ** (1.0 / (2 - alpha))
        if cap < 2 * h - 1e-12:
            entry.accepted, entry.reason = False, f"eps(lambda) <= {cap:.4g} is below grid resolution {2 * h:.4g}"
            continue
        try:
            M = moreau_envelope(V, lam, out_grid=_moreau_out_grid(V, setup, e_hi + 2 * h), bound=bound)
        except DomainError as exc:
            entry.accepted, entry.reason = False, str(exc)
            continue
        cands = _eps_grid(cap, 2 * h)
        eps, _ = _largest_feasible(cands, lambda e: (M.inner.contains_region(setup.omega_delta, pad=e, seed=seed),
                                                     None))
        if eps is None:
            entry.accepted, entry.reason = False, "omega_delta + B(0,eps) not inside the Moreau inner domain"
            continue
        Ve = mollify(M, eps)
        law = feedback_from(Ve, problem)
        _check_valid(law, pts, f"lambda={lam:g}")
        grad_M = M.values.gradient
        eta_ach = _gap_sup(Ve.gradient, grad_M, pts, power=p, cell=cell_pts)
        sq = sigma_quantities(setup, problem, eps, moreau=M, seed=seed, **(sigma_kw or {}))
        nb = float(np.max(np.linalg.norm(np.einsum("nij,ni->nj", problem.control_matrix(pts), grad_M(pts)), axis=1)))
        tau_esc = _escape_tau(setup.delta, sq.sigma1_lambda + sq.sigma2 * nb / problem.beta)
        tau, branch = _choose_tau(tau_esc, float(kappa.raw(lam)), kappa.tau_max)
        eta_t = float(eta(lam))
        entry.eps, entry.tau, entry.tau_branch = eps, tau, branch
        entry.sigma = sq.to_dict()
        entry.extra = {"eta_achieved": eta_ach, "eta_target": eta_t, "eta_met": bool(eta_ach <= eta_t),
                       "Bt_grad_moreau_sup": nb, "tau_escape": tau_esc}
        entry.law, entry.surrogate = law, Ve
    return plan


# ---------------------------------------------------------------------------
# evaluation


def evaluate_plan(plan: SynthesisPlan, problem: ControlProblem, V, points, norm: str = "sup") -> list:
    """Measured ``||V_{u,tau} + V(y(tau)) - V||`` over ``points`` for each accepted entry.

    ``norm="sup"`` gives the maximum; an entry whose trajectories leave the
    law's domain is reported as ``inf``.
    """
    X = np.atleast_2d(points)
    vf = V.eval if hasattr(V, "eval") else V
    out = []
    for e in plan.accepted():
        cfg = SimConfig(horizon=e.tau, scheme="rk45", rtol=1e-10, atol=1e-12, record=False)
        res = cost_value(problem, e.law, X, cfg)
        ok = res.status == COMPLETED
        if not ok.all():
            out.append(np.inf)
            continue
        err = np.abs(res.cost + vf(res.final) - vf(X))
        out.append(float(np.max(err)))
    return out
