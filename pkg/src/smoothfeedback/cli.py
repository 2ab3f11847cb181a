"""Command-line runner: one JSON config, deterministic CSV/JSON/binary outputs.

Exit codes: 0 on success (all requested certificates pass), 2 on an
invalid config, 3 when at least one certificate fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import multiprocessing as mp
import os
import re
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import example8
from .certify import (LyapunovSetup, certificates_csv, certify_linfty, certify_lp_sweep, escape_bound_a, escape_bound_b,
                      escape_bound_c, jacobian_volume_check)
from .core import Ball, BoxGrid, ControlProblem, DomainError, ScalarField, ValidationError, make_rng, to_jsonable
from .regularize import mollify, moreau_envelope
from .simulate import SimConfig, cost_value, hjb_residual, integrate_closed_loop
from .synthesis import (AnalyticValue, KappaSchedule, PlanError, evaluate_plan, feedback_from, law_from_map,
                        plan_c1, plan_hoelder, plan_semiconcave, plan_semiconvex)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CERT_FAIL = 3

SUBCOMMANDS = ("value-grid", "synthesize", "simulate", "certify", "nondiff-map", "report")


# ---------------------------------------------------------------------------
# config


def _get(d: dict, path: str, default=None, kind=None):
    """Fetch ``path`` (dotted) from ``d`` with a type check naming the field."""
    cur = d
    for key in path.split("."):
        if not isinstance(cur, dict) or key not in cur:
            return default
        cur = cur[key]
    if kind is None or cur is None:
        return cur
    try:
        if kind is float:
            if isinstance(cur, bool):
                raise TypeError
            return float(cur)
        if kind is int:
            if isinstance(cur, bool) or int(cur) != cur:
                raise TypeError
            return int(cur)
        if kind is list:
            if not isinstance(cur, list):
                raise TypeError
            return cur
        if kind is str:
            if not isinstance(cur, str):
                raise TypeError
            return cur
    except (TypeError, ValueError):
        raise ValidationError(path, f"expected {kind.__name__}, got {cur!r}") from None
    return cur


def _floats(d: dict, path: str, default) -> list:
    vals = _get(d, path, default, list)
    try:
        return [float(v) for v in vals]
    except (TypeError, ValueError):
        raise ValidationError(path, f"expected a list of numbers, got {vals!r}") from None


def _positive(val: float, path: str) -> float:
    if not np.isfinite(val) or val <= 0:
        raise ValidationError(path, f"must be positive, got {val}")
    return val


@dataclass
class RunConfig:
    """Parsed config with the raw text kept for echoing."""

    raw: dict
    text: str
    seed: int
    jobs: int

    def get(self, path, default=None, kind=None):
        return _get(self.raw, path, default, kind)

    def floats(self, path, default):
        return _floats(self.raw, path, default)


def locate(text: str, field_path: str) -> Optional[int]:
    """Line of the last key of ``field_path`` in the config text."""
    key = field_path.split(".")[-1].split("[")[0]
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path: str, seed: Optional[int], jobs: int) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError("config", f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config", "top level must be a JSON object")
    s = seed if seed is not None else _get(raw, "seed", 0, int)
    if s < 0 or s >= 2**64:
        raise ValidationError("seed", f"must be an unsigned 64-bit integer, got {s}")
    if jobs < 1:
        raise ValidationError("jobs", "must be >= 1")
    return RunConfig(raw, text, int(s), int(jobs))


# ---------------------------------------------------------------------------
# problem, value and Lyapunov setup


@dataclass
class Scenario:
    problem: ControlProblem
    value: object
    setup: Optional[LyapunovSetup]
    ex8: Optional[example8.Example8Config] = None
    grid_value: Optional[ScalarField] = None


def example8_config(cfg: RunConfig) -> example8.Example8Config:
    p = cfg.get("problem", {})
    kw = {}
    for key in ("alpha", "beta", "sigma", "horizon"):
        if key in p:
            kw[key] = _get(p, key, kind=float)
    if "nodes" in p:
        kw["nodes"] = _get(p, "nodes", kind=int)
    if "z" in p:
        kw["z"] = tuple(_floats(p, "z", None))
    g = cfg.get("grid", {})
    if "lower" in g:
        kw["lower"] = tuple(_floats(g, "lower", None))
    if "upper" in g:
        kw["upper"] = tuple(_floats(g, "upper", None))
    if "points" in g:
        kw["points"] = tuple(int(v) for v in _get(g, "points", kind=list))
    kw["seed"] = cfg.seed
    try:
        return example8.Example8Config(**kw)
    except ValidationError as exc:
        raise ValidationError(f"problem.{exc.field_name}", exc.msg) from None


def _matrix(p: dict, key: str, shape=None) -> np.ndarray:
    try:
        M = np.array(p[key], dtype=float)
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"problem.{key}", "missing or not a numeric matrix") from None
    if M.ndim != 2 or (shape is not None and M.shape != shape):
        raise ValidationError(f"problem.{key}", f"expected shape {shape}, got {M.shape}")
    return M


def linear_quadratic(cfg: RunConfig):
    """``y' = A y + B u`` with ``ell = y^T Q y / 2``; value ``y^T P y / 2`` from the Riccati equation."""
    from scipy.linalg import solve_continuous_are

    p = cfg.get("problem")
    beta = _positive(_get(p, "beta", 1.0, float), "problem.beta")
    A = _matrix(p, "A")
    d = A.shape[0]
    B = _matrix(p, "B")
    if B.shape[0] != d:
        raise ValidationError("problem.B", f"expected {d} rows, got {B.shape[0]}")
    Q = _matrix(p, "Q", (d, d))
    if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() < 0:
        raise ValidationError("problem.Q", "must be symmetric positive semi-definite")
    m = B.shape[1]
    prob = ControlProblem(f=lambda Y: Y @ A.T, B=lambda Y: np.broadcast_to(B, (len(Y), d, m)),
                          ell=lambda Y: 0.5 * np.einsum("ni,ij,nj->n", Y, Q, Y), beta=beta, dim=d, ctrl_dim=m,
                          name="linear_quadratic")
    try:
        P = solve_continuous_are(A, B, Q, beta * np.eye(m))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ValidationError("problem.A", f"Riccati equation has no stabilizing solution: {exc}") from None
    P = 0.5 * (P + P.T)
    value = AnalyticValue(lambda Y: 0.5 * np.einsum("ni,ij,nj->n", Y, P, Y), lambda Y: Y @ P, name="riccati")
    return prob, value, P


def _value_grid(cfg: RunConfig, base: ScalarField) -> ScalarField:
    """Optionally resample the value field onto ``value.resample`` with cubic interpolation."""
    rs = cfg.get("value.resample")
    if rs is None:
        return base
    g = BoxGrid(tuple(_floats(rs, "lower", None)), tuple(_floats(rs, "upper", None)),
                tuple(int(v) for v in _get(rs, "points", kind=list)))
    src = base.with_order("cubic")
    if not np.all(base.grid.contains(g.nodes())):
        raise ValidationError("value.resample", "resampling grid leaves the value grid")
    return ScalarField(g, src.eval(g.nodes()), order="cubic", name=base.name)


def _surrogate_grid(cfg: RunConfig, default: Optional[BoxGrid]) -> BoxGrid:
    s = cfg.get("surrogate_grid")
    if s is None:
        if default is None:
            raise ValidationError("surrogate_grid", "required for this problem")
        return default
    return BoxGrid(tuple(_floats(s, "lower", None)), tuple(_floats(s, "upper", None)),
                   tuple(int(v) for v in _get(s, "points", kind=list)))


def build_scenario(cfg: RunConfig, need_setup: bool = True) -> Scenario:
    kind = cfg.get("problem.kind", "example8", str)
    delta = _positive(cfg.get("lyapunov.delta", 1.0, float), "lyapunov.delta")
    if kind == "example8":
        ex = example8_config(cfg)
        prob = example8.problem(ex)
        src = cfg.get("value.source", "analytic" if ex.alpha == 0 else "file", str)
        grid_value = None
        if src == "analytic":
            if ex.alpha != 0:
                raise ValidationError("value.source", "analytic value is only available for alpha = 0")
            value = AnalyticValue(lambda Y: example8.v0(Y, ex), lambda Y: example8.grad_v0(Y, ex), name="V0")
        elif src == "file":
            path = cfg.get("value.path", None, str)
            if path is None:
                raise ValidationError("value.path", "required when value.source is 'file'")
            if not os.path.exists(path):
                raise ValidationError("value.path", f"no such file: {path}")
            value = grid_value = _value_grid(cfg, ScalarField.load(path, order="cubic", name="V_alpha"))
        else:
            raise ValidationError("value.source", f"unknown source {src!r}")
        setup = example8.lyapunov_setup(ex, delta, seed=cfg.seed) if need_setup else None
        return Scenario(prob, value, setup, ex, grid_value)
    if kind == "linear_quadratic":
        prob, value, P = linear_quadratic(cfg)
        setup = None
        if need_setup:
            R = _positive(cfg.get("lyapunov.radius", 1.0, float), "lyapunov.radius")
            d = prob.dim
            half = np.sqrt(R**2 + 2 * delta) * 1.05 + 0.05
            setup = LyapunovSetup(lambda Y: 0.5 * np.sum(Y * Y, axis=1), lambda Y: np.atleast_2d(Y),
                                  Ball(np.zeros(d), R), delta, (-half * np.ones(d), half * np.ones(d)),
                                  seed=cfg.seed)
        return Scenario(prob, value, setup)
    raise ValidationError("problem.kind", f"unknown problem kind {kind!r}")


def _grid_field(sc: Scenario, cfg: RunConfig) -> ScalarField:
    """Nodal value field: the loaded grid, or the analytic value sampled on ``surrogate_grid``."""
    if sc.grid_value is not None and cfg.get("surrogate_grid") is None:
        return sc.grid_value
    g = _surrogate_grid(cfg, None)
    v = sc.grid_value if sc.grid_value is not None else sc.value
    if sc.grid_value is not None and not np.all(sc.grid_value.grid.contains(g.nodes())):
        raise ValidationError("surrogate_grid", "leaves the value grid")
    return ScalarField(g, v.eval(g.nodes()), order="cubic", name=getattr(v, "name", "V"))


def _g_defect(problem: ControlProblem, v):
    """Positive part of the HJB defect of a smooth ``v``: the smallest admissible ``g``."""
    def g(Y):
        return np.maximum(-hjb_residual(problem, v.gradient, np.atleast_2d(Y)), 0.0)
    return g


# ---------------------------------------------------------------------------
# output helpers


class Output:
    """Output directory writer: LF line endings, sorted JSON keys."""

    def __init__(self, root: str, cfg: RunConfig, command: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.write_text("config.json", cfg.text)
        self.write_json("run.json", {"command": command, "seed": cfg.seed})

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", newline="\n") as fh:
            fh.write(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def write_rows(self, name: str, quantity: str, header: list, rows) -> None:
        buf = io.StringIO()
        buf.write(f"# quantity: {quantity}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(c) for c in r])
        self.write_text(name, buf.getvalue())


def _cell(c):
    if isinstance(c, (bool, np.bool_)):
        return int(c)
    if isinstance(c, (float, np.floating)):
        return repr(float(c))
    if isinstance(c, (int, np.integer)):
        return int(c)
    return "" if c is None else c


# ---------------------------------------------------------------------------
# subcommands


def cmd_value_grid(cfg: RunConfig, out: Output) -> int:
    if cfg.get("problem.kind", "example8", str) != "example8":
        raise ValidationError("problem.kind", "value-grid is only defined for example8")
    ex = example8_config(cfg)
    mode = cfg.get("grid.multistart", "shadow", str)
    theta = cfg.get("grid.theta", None, float)
    vg = example8.value_alpha_grid(ex, multistart=mode, jobs=cfg.jobs, theta=theta)
    out.write_text("value_grid.csv", vg.to_csv())
    out.write_text("nondiff.csv", vg.nondiff_csv())
    vg.as_field().save(out.path("value_grid.bin"))
    flags = vg.flags()
    out.write_json("value_grid_meta.json", {
        "alpha": vg.alpha, "theta_diam": vg.theta, "multistart": mode, "nodes": len(flags),
        "unconverged": int(np.sum(flags == "unconverged")), "unpolished": int(np.sum(flags == "unpolished")),
        "grid": {"lower": list(ex.lower), "upper": list(ex.upper), "points": list(ex.points)},
        "difference_quotients": vg.difference_quotients(),
    })
    return EXIT_OK


def _kappa(cfg: RunConfig, default_form: str, default_param: float) -> KappaSchedule:
    return KappaSchedule(cfg.get("synthesize.kappa.form", default_form, str),
                         cfg.get("synthesize.kappa.param", default_param, float),
                         cfg.get("synthesize.kappa.tau_max", 50.0, float))


def run_pipeline(cfg: RunConfig, sc: Scenario):
    pipe = cfg.get("synthesize.pipeline", "c1", str)
    p = cfg.get("synthesize.p", 2.0, float)
    seed = cfg.seed
    if pipe == "c1":
        params = cfg.floats("synthesize.params", [0.4, 0.2, 0.1, 0.05])
        V = _grid_field(sc, cfg)
        fam = {e: feedback_from(mollify(V, e), sc.problem) for e in params}
        return plan_c1(sc.problem, sc.value, sc.setup, fam, _kappa(cfg, "log", 1.0), seed=seed)
    if pipe == "semiconcave":
        params = cfg.floats("synthesize.params", [0.4, 0.2, 0.1, 0.05])
        return plan_semiconcave(sc.problem, _grid_field(sc, cfg), sc.setup, params, _kappa(cfg, "log", 2.0), p,
                                seed=seed)
    if pipe == "semiconvex":
        params = cfg.floats("synthesize.params", [0.2, 0.1])
        return plan_semiconvex(sc.problem, _grid_field(sc, cfg), sc.setup, params, _kappa(cfg, "power", 0.5),
                               eps_max=cfg.get("synthesize.eps_max", 1.0, float),
                               bound=cfg.get("synthesize.bound", "local", str), seed=seed)
    if pipe == "hoelder":
        params = cfg.floats("synthesize.params", [0.2, 0.1, 0.05])
        return plan_hoelder(sc.problem, _grid_field(sc, cfg), sc.setup, params, _kappa(cfg, "power", 0.5), p,
                            alpha=cfg.get("synthesize.holder_alpha", 1.0, float),
                            bound=cfg.get("synthesize.bound", "local", str), seed=seed)
    raise ValidationError("synthesize.pipeline", f"unknown pipeline {pipe!r}")


def cmd_synthesize(cfg: RunConfig, out: Output) -> int:
    sc = build_scenario(cfg)
    plan = run_pipeline(cfg, sc)
    plan.check_invariants()
    out.write_text("plan.json", plan.to_json() + "\n")
    n_eval = cfg.get("synthesize.n_eval", 200, int)
    errs = evaluate_plan(plan, sc.problem, sc.value, sc.setup.starts(n_eval, seed=cfg.seed)) if n_eval > 0 else []
    acc = plan.accepted()
    rows = []
    for e in plan.entries:
        err = errs[acc.index(e)] if e in acc and errs else None
        rows.append([e.param, e.eps, e.lam, e.s, e.tau, e.tau_branch, e.K, e.predicted_bound, e.accepted, err])
    out.write_rows("plan.csv", f"{plan.pipeline} pipeline: horizon per parameter and measured sup error of "
                   "V_{u,tau} + V(y(tau)) - V over omega",
                   ["param", "eps", "lambda", "s", "tau", "tau_branch", "K", "predicted_bound", "accepted",
                    "sup_error"], rows)
    return EXIT_OK


def _law(cfg: RunConfig, sc: Scenario, path: str = "simulate.law"):
    kind = cfg.get(f"{path}.kind", "value", str)
    if kind == "value":
        return feedback_from(sc.value, sc.problem)
    if kind == "mollified":
        eps = _positive(cfg.get(f"{path}.eps", None, float) or 0.0, f"{path}.eps")
        return feedback_from(mollify(_grid_field(sc, cfg), eps), sc.problem)
    if kind == "linear":
        K = np.array(cfg.get(f"{path}.gain", None, list) or [], dtype=float)
        if K.shape != (sc.problem.ctrl_dim, sc.problem.dim):
            raise ValidationError(f"{path}.gain", f"expected shape {(sc.problem.ctrl_dim, sc.problem.dim)}")
        return law_from_map(lambda Y: np.atleast_2d(Y) @ K.T, sc.problem, name="linear")
    raise ValidationError(f"{path}.kind", f"unknown law kind {kind!r}")


def _starts(cfg: RunConfig, sc: Scenario, path: str) -> np.ndarray:
    pts = cfg.get(f"{path}.starts", [], list)
    try:
        Y = np.array(pts, dtype=float).reshape(-1, sc.problem.dim)
    except ValueError:
        raise ValidationError(f"{path}.starts", f"expected a list of {sc.problem.dim}-vectors") from None
    n = cfg.get(f"{path}.n_random", 0, int)
    if n > 0:
        Y = np.concatenate([Y, sc.setup.omega.sample(n, make_rng(cfg.seed, 101))])
    if len(Y) == 0:
        raise ValidationError(f"{path}.starts", "no initial states")
    return Y


def cmd_simulate(cfg: RunConfig, out: Output) -> int:
    sc = build_scenario(cfg)
    law = _law(cfg, sc)
    Y0 = _starts(cfg, sc, "simulate")
    T = cfg.get("simulate.horizon", 5.0, float)
    esc = sc.setup.omega_delta if cfg.get("simulate.stop_on_escape", False) else None
    sim = SimConfig(horizon=T, scheme=cfg.get("simulate.scheme", "rk45", str),
                    dt=cfg.get("simulate.dt", 1e-2, float), rtol=cfg.get("simulate.rtol", 1e-10, float),
                    atol=cfg.get("simulate.atol", 1e-12, float), escape=esc)
    rows = []
    for k, y0 in enumerate(Y0):
        tr = integrate_closed_loop(sc.problem, law, y0, sim)
        out.write_text(f"trajectory_{k:04d}.csv", tr.to_csv())
        v = sc.value
        rows.append([k, *y0, tr.cost, tr.status, tr.exit_time, *tr.final_state,
                     tr.cost + float(v.eval(tr.final_state)) - float(v.eval(y0))])
    d = sc.problem.dim
    out.write_rows("summary.csv", "closed-loop cost V_{u,T}(y0) and DPP defect V_{u,T} + V(y(T)) - V(y0)",
                   ["run"] + [f"y0_{a}" for a in range(d)] + ["cost", "status", "exit_time"]
                   + [f"yT_{a}" for a in range(d)] + ["dpp_defect"], rows)
    return EXIT_OK


def _certify_suite(cfg: RunConfig, sc: Scenario) -> list:
    seed = cfg.seed
    suite = cfg.get("certify.suite", ["linfty", "lp", "jacobian", "escape"], list)
    unknown = [s for s in suite if s not in ("linfty", "lp", "jacobian", "escape", "corrupted")]
    if unknown:
        raise ValidationError("certify.suite", f"unknown entries {unknown}")
    T = _positive(cfg.get("certify.T", 1.0, float), "certify.T")
    eps_list = cfg.floats("certify.eps", [0.2, 0.1, 0.05])
    lam_list = cfg.floats("certify.lambdas", [0.2, 0.1])
    p_list = cfg.floats("certify.p", [1.0, 2.0])
    n_starts = cfg.get("certify.n_starts", 400, int)
    setup, prob = sc.setup, sc.problem
    V = _grid_field(sc, cfg)
    laws = {e: feedback_from(mollify(V, e), prob) for e in eps_list}
    omega = setup.omega
    Omega = setup.omega_delta
    certs = []
    smooth = sc.value if isinstance(sc.value, AnalyticValue) else None
    if sc.ex8 is not None and sc.ex8.alpha != 0 and cfg.get("certify.smooth_v", "v0", str) == "v0":
        ex = sc.ex8
        smooth = AnalyticValue(lambda Y: example8.v0(Y, ex), lambda Y: example8.grad_v0(Y, ex), name="V0")
    if "linfty" in suite:
        if smooth is None:
            raise ValidationError("certify.suite", "linfty needs a smooth supersolution")
        g = _g_defect(prob, smooth)
        for e, law in laws.items():
            c = certify_linfty(prob, smooth, law, T, omega, Omega, g=g, n_starts=n_starts, seed=seed)
            c.constants["eps"] = e
            certs.append(c)
    if "lp" in suite:
        by_eps = {e: certify_lp_sweep(prob, V, law, T, omega, Omega, p_list, seed=seed) for e, law in laws.items()}
        for k in range(len(p_list)):
            for e in eps_list:
                c = by_eps[e][k]
                c.constants["eps"] = e
                certs.append(c)
    if "jacobian" in suite:
        e = min(eps_list)
        law = laws[e]
        u_v = feedback_from(sc.value, prob)
        p = max(p_list)

        def phi(Y):
            du = np.asarray(law(Y)) - np.asarray(u_v(Y))
            return np.sum(du * du, axis=1) ** p

        n = cfg.get("certify.jacobian_samples", 10000, int)
        c = jacobian_volume_check(prob, law, omega, Omega, T, phi, samples=n, seed=seed)
        c.constants.update({"eps": e, "p": p})
        certs.append(c)
    if "escape" in suite:
        if smooth is not None:
            for e, law in laws.items():
                c = escape_bound_a(setup, prob, law, feedback_from(smooth, prob), seed=seed)
                c.constants["eps"] = e
                certs.append(c)
        for e in eps_list:
            certs.append(escape_bound_b(setup, prob, V, e, seed=seed))
        for lam in lam_list:
            try:
                M = moreau_envelope(V, lam, bound="local")
            except DomainError:
                M = None  # escape_bound_c reports the empty domain
            for e in eps_list:
                if e <= lam:
                    certs.append(escape_bound_c(setup, prob, V, e, lam, seed=seed, moreau=M))
    if "corrupted" in suite:
        if smooth is None:
            raise ValidationError("certify.suite", "corrupted needs a smooth supersolution")
        good = feedback_from(smooth, prob)
        bad = law_from_map(lambda Y: -np.asarray(good(Y)), prob, name="corrupted")
        c = certify_linfty(prob, smooth, bad, T, omega, Omega, g=_g_defect(prob, smooth), n_starts=n_starts,
                           seed=seed)
        c.name = "linfty_corrupted"
        certs.append(c)
    return certs


def cmd_certify(cfg: RunConfig, out: Output) -> int:
    sc = build_scenario(cfg)
    certs = _certify_suite(cfg, sc)
    out.write_json("certificates.json", [c.to_dict() for c in certs])
    out.write_text("certificates.csv", certificates_csv(certs, "predicted bound (rhs) versus measured value (lhs)"))
    failed = [c.name for c in certs if not c.verdict]
    if failed:
        logger.warning("%d of %d certificates failed: %s", len(failed), len(certs), failed)
        return EXIT_CERT_FAIL
    return EXIT_OK


def _probe(args):
    y0, ex, alpha, theta, key = args
    pr = example8.superdifferential_probe(y0, ex, alpha, theta_diam=theta, seed_key=key)
    return [*y0, len(pr.optima), pr.diameter, pr.cost_spread, pr.nondifferentiable]


def cmd_nondiff_map(cfg: RunConfig, out: Output) -> int:
    if cfg.get("problem.kind", "example8", str) != "example8":
        raise ValidationError("problem.kind", "nondiff-map is only defined for example8")
    ex = example8_config(cfg)
    pts = cfg.get("nondiff_map.points", None, list)
    if pts is not None:
        try:
            Y = np.array(pts, dtype=float).reshape(-1, 2)
        except ValueError:
            raise ValidationError("nondiff_map.points", "expected a list of 2-vectors") from None
    else:
        a, b = _floats(cfg.raw, "nondiff_map.y1", [-6.0, -1.0])
        n = cfg.get("nondiff_map.n", 11, int)
        if n < 1:
            raise ValidationError("nondiff_map.n", "must be >= 1")
        Y = np.stack([np.linspace(a, b, n), np.full(n, cfg.get("nondiff_map.y2", 0.0, float))], axis=1)
    theta = cfg.get("nondiff_map.theta", None, float)
    theta = example8.theta_diam(ex) if theta is None else theta
    tasks = [(y, ex, ex.alpha, theta, k) for k, y in enumerate(Y)]
    if cfg.jobs > 1:
        with mp.get_context("fork").Pool(cfg.jobs) as pool:
            rows = pool.map(_probe, tasks)
    else:
        rows = [_probe(t) for t in tasks]
    out.write_rows("nondiff_map.csv", f"superdifferential diameter from near-tied optima (alpha={ex.alpha:g}, "
                   f"theta_diam={theta:.6g}); nondiff: 1 if flagged",
                   ["y0_1", "y0_2", "n_optima", "diameter", "cost_spread", "nondiff"], rows)
    trend = cfg.get("nondiff_map.trend_alphas", None, list)
    if trend:
        y0 = _floats(cfg.raw, "nondiff_map.trend_y0", [-5.0, 0.0])
        if len(y0) != 2:
            raise ValidationError("nondiff_map.trend_y0", "expected a 2-vector")
        alphas = _floats(cfg.raw, "nondiff_map.trend_alphas", None)
        if any(a < 0 for a in alphas):
            raise ValidationError("nondiff_map.trend_alphas", "bump heights must be nonnegative")
        keys = ["alpha", "J", "u0_1", "u0_2", "min_dist_to_z", "bump_exposure", "polished"]
        out.write_rows("alpha_trend.csv", f"optimal cost and bump exposure from y0={y0} as alpha grows", keys,
                       [[r[k] for k in keys] for r in example8.alpha_trend(y0, ex, alphas)])
    return EXIT_OK


def _read_csv(path: str):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    quantity = ""
    if rows and rows[0] and rows[0][0].startswith("# quantity:"):
        quantity = rows[0][0][len("# quantity:"):].strip()
        rows = rows[1:]
    return quantity, rows


def cmd_report(cfg: RunConfig, out: Output) -> int:
    inputs = cfg.get("report.inputs", None, list)
    if not inputs:
        raise ValidationError("report.inputs", "list of output directories is required")
    files, certs = [], []
    for d in inputs:
        if not os.path.isdir(d):
            raise ValidationError("report.inputs", f"not a directory: {d}")
        for name in sorted(os.listdir(d)):
            if not name.endswith(".csv") or name.startswith("trajectory_"):
                continue
            quantity, rows = _read_csv(os.path.join(d, name))
            files.append([d, name, quantity, max(len(rows) - 1, 0)])
            if name == "certificates.csv" and rows:
                head = rows[0]
                for r in rows[1:]:
                    rec = dict(zip(head, r))
                    certs.append([d, rec.get("name"), rec.get("reference"), rec.get("rhs"), rec.get("lhs"),
                                  rec.get("slack"), rec.get("verdict")])
    out.write_rows("report_files.csv", "inventory of aggregated tables", ["directory", "file", "quantity", "rows"],
                   files)
    out.write_rows("report_certificates.csv", "certificate verdicts across runs",
                   ["directory", "name", "reference", "rhs", "lhs", "slack", "verdict"], certs)
    n_pass = sum(1 for c in certs if c[-1] in ("1", "True", "pass"))
    out.write_json("report.json", {"tables": len(files), "certificates": len(certs), "passed": n_pass})
    return EXIT_OK


COMMANDS = {
    "value-grid": cmd_value_grid,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "certify": cmd_certify,
    "nondiff-map": cmd_nondiff_map,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="seed (overrides the config's 'seed')")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for node-parallel commands")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="smoothfeedback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    try:
        cfg = load_config(args.config, args.seed, args.jobs)
        out = Output(args.out, cfg, args.command)
        return COMMANDS[args.command](cfg, out)
    except FileNotFoundError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as exc:
        line = locate(cfg.text, exc.field_name) if cfg is not None else None
        where = f"{args.config}:{line}: " if line else f"{args.config}: "
        kind = "plan error" if isinstance(exc, PlanError) else "invalid field"
        print(f"error: {where}{kind} '{exc.field_name}': {exc.msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
