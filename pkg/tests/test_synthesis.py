import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothfeedback import example8
from smoothfeedback.certify import LyapunovSetup
from smoothfeedback.core import Ball, BoxGrid, ControlProblem, DomainError, ScalarField
from smoothfeedback.regularize import mollify, semiconcavity_constant
from smoothfeedback.simulate import hamiltonian
from smoothfeedback.synthesis import (SWEEP, TAU_MAX, FeedbackLaw, KappaSchedule, PlanError, _decreasing,
                                      feedback_from, hoelder_tail, law_from_map, plan_c1, plan_hoelder,
                                      plan_semiconcave, plan_semiconvex, remark_eta, semiconcave_tail)


@pytest.fixture(scope="module")
def prob0(cfg0):
    return example8.problem(cfg0)


@pytest.fixture(scope="module")
def gentle_setup():
    """w = |y|^2/2 with omega = B(0, 1), delta = 0.5: omega_delta = B(0, sqrt 2)."""
    return LyapunovSetup(lambda Y: 0.5 * np.sum(np.atleast_2d(Y) ** 2, axis=1), lambda Y: np.atleast_2d(Y),
                         Ball([0.0, 0.0], 1.0), 0.5, ((-1.6, -1.6), (1.6, 1.6)))


# -- schedules


def test_kappa_formulas():
    assert KappaSchedule("log", 1.0)(0.1) == pytest.approx(np.log(10))
    assert KappaSchedule("power", 0.5)(0.01) == pytest.approx(10.0)
    k = KappaSchedule("log", 2.0, tau_max=5.0)
    assert k(0.0) == 5.0 and k.capped(1e-6) and not k.capped(0.5)
    assert np.isinf(k.raw(0.0))
    vals = KappaSchedule("power", 0.3).raw(SWEEP)
    assert np.all(np.diff(vals) > 0)


def test_kappa_validation():
    from smoothfeedback.core import ValidationError

    with pytest.raises(ValidationError, match="kappa.form"):
        KappaSchedule("exp", 1.0)
    with pytest.raises(ValidationError, match="kappa.param"):
        KappaSchedule("log", 0.0)


def test_semiconcave_tail_admissible_log():
    K, p = 4.0, 2.0
    assert _decreasing(semiconcave_tail(KappaSchedule("log", 2.0), K, p))
    assert not _decreasing(semiconcave_tail(KappaSchedule("log", 1.0), K, p))


def test_semiconcave_tail_p1_drops_kappa_power():
    k = KappaSchedule("log", 3.0)
    s = np.array([0.1, 0.01])
    expected = np.log(np.expm1(2.0 * k.raw(s))) + 2 * np.log(s)
    assert np.allclose(semiconcave_tail(k, 2.0, 1.0, s), expected)


@pytest.mark.parametrize("q", [0.2, 0.5, 0.9])
def test_hoelder_tail_with_remark_eta(q):
    kappa = KappaSchedule("power", q)
    K_of_s = lambda s: 2 * 3 / s + 0.0  # noqa: E731
    eta = remark_eta(K_of_s, kappa, 2.0)
    tail = hoelder_tail(kappa, K_of_s, eta, 2.0, 1.0)
    assert _decreasing(tail) and tail[-1] < tail[0]


# -- feedback laws


def test_feedback_examples(cfg0, prob0):
    Y = np.random.default_rng(0).normal(size=(30, 2))
    u = feedback_from(lambda X: example8.grad_v0(X, cfg0), prob0)
    assert np.allclose(u(Y), -Y, atol=1e-15)
    g = BoxGrid((-3.0, -3.0), (3.0, 3.0), (61, 61))
    uc = feedback_from(ScalarField(g, np.full(g.size, 2.0), order="cubic"), prob0)
    assert np.all(uc(Y[np.all(np.abs(Y) < 3, axis=1)]) == 0.0)
    zeroB = ControlProblem(f=lambda Y: np.zeros_like(Y), B=lambda Y: np.zeros((len(Y), 2, 2)),
                           ell=lambda Y: np.zeros(len(Y)), beta=1.0, dim=2, ctrl_dim=2)
    assert np.all(feedback_from(lambda X: 5 * X, zeroB)(Y) == 0.0)


def test_field_law_gradient_and_domain(cfg0, prob0, v0_grid):
    law = feedback_from(v0_grid, prob0)
    assert law.kind == "field"
    Y = np.random.default_rng(1).uniform(-4, 4, size=(100, 2))
    assert np.max(np.abs(law(Y) + Y)) < 1e-10
    with pytest.raises(DomainError):
        law(np.array([5.0, 0.0]))
    assert law_from_map(lambda X: -X, prob0).kind == "analytic"
    with pytest.raises(ValueError):
        FeedbackLaw(prob0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_feedback_is_argmax_of_hamiltonian(seed):
    cfg = example8.Example8Config(alpha=10.0, beta=0.5)
    prob = example8.problem(cfg)
    rng = np.random.default_rng(seed)
    v = lambda X: np.sin(X[:, :1]) * np.array([1.0, 0.0]) + X ** 2  # noqa: E731
    law = feedback_from(v, prob)
    y = rng.uniform(-3, 3, size=(1, 2))
    p = v(y)
    U = rng.normal(size=(200, 2)) * 4
    best = hamiltonian(prob, y, p, law(y))
    others = hamiltonian(prob, np.repeat(y, 200, 0), np.repeat(p, 200, 0), U)
    assert np.all(others <= best + 1e-12)


# -- C1 pipeline


def test_c1_exact_law_gives_cap(cfg0, prob0, setup0, v0_exact):
    law = feedback_from(v0_exact, prob0)
    plan = plan_c1(prob0, v0_exact, setup0, {0.1: law}, KappaSchedule("log", 1.0), n_points=1000)
    e = plan.entries[0]
    assert e.s == 0.0 and e.tau == TAU_MAX and e.tau_branch == "cap" and e.predicted_bound == 0.0


def test_c1_side_condition_names_eps(prob0, setup0, v0_exact):
    bad = law_from_map(lambda X: -np.atleast_2d(X) + 0.5, prob0)
    with pytest.raises(PlanError, match="eps=0.3"):
        plan_c1(prob0, v0_exact, setup0, {0.3: bad}, KappaSchedule("log", 1.0), n_points=1000)


def _h_grid_family(fn, prob, eps_list):
    fam = {}
    for eps in eps_list:
        n = int(round(7.0 / (eps / 4))) + 1
        g = BoxGrid((-3.5, -3.5), (3.5, 3.5), (n, n))
        fam[eps] = feedback_from(mollify(ScalarField(g, fn(g.nodes())), eps, order="linear"), prob)
    return fam


def test_c1_sweep_on_h_grids_v0(cfg0, prob0, setup0, v0_exact):
    """Mollification is exact on V0 (a quadratic), so every bound sits at round-off."""
    fam = _h_grid_family(lambda X: example8.v0(X, cfg0), prob0, (0.4, 0.2, 0.1))
    plan = plan_c1(prob0, v0_exact, setup0, fam, KappaSchedule("log", 1.0), n_points=2000)
    # deviations are round-off, so their ordering (and that of tau) carries no information
    assert all(e.s < 1e-12 and e.predicted_bound < 1e-20 for e in plan.entries)
    assert all(e.tau > 0 for e in plan.entries)


def test_c1_sweep_decreases_for_nonquadratic_reference(prob0, setup0):
    from smoothfeedback.synthesis import AnalyticValue

    fn = lambda X: np.sqrt(1 + np.sum(np.atleast_2d(X) ** 2, axis=1))  # noqa: E731
    V = AnalyticValue(fn, lambda X: np.atleast_2d(X) / fn(X)[:, None])
    plan = plan_c1(prob0, V, setup0, _h_grid_family(fn, prob0, (0.4, 0.2, 0.1)), KappaSchedule("log", 1.0),
                   n_points=2000)
    preds = [e.predicted_bound for e in sorted(plan.entries, key=lambda e: -e.param)]
    assert preds[0] > preds[1] > preds[2] > 0
    plan.check_invariants()
    doc = json.loads(plan.to_json())
    assert doc["pipeline"] == "c1" and {"eps", "tau", "s", "predicted_bound"} <= set(doc["entries"][0])


# -- semi-concave pipeline


@pytest.fixture(scope="module")
def semiconcave_plan(prob0, setup0, v0_grid):
    return plan_semiconcave(prob0, v0_grid, setup0, [0.4, 0.2, 0.1], KappaSchedule("log", 2.0), 2.0,
                            n_points=1000, sigma_kw={"n_centers": 200, "n_dirs": 16, "n_radii": 4})


def test_semiconcave_plan(semiconcave_plan):
    plan = semiconcave_plan
    plan.check_invariants()
    assert plan.constants["C"] == pytest.approx(1.0, abs=1e-6)
    assert plan.constants["K"] == pytest.approx(4.0, abs=1e-5)
    for e in plan.entries:
        assert e.tau <= e.extra["tau_escape"] + 1e-12 or e.tau_branch != "escape"
        assert e.tau <= KappaSchedule("log", 2.0).raw(e.s)


def test_semiconcave_kappa_rejected(prob0, setup0, v0_grid):
    with pytest.raises(PlanError, match="kappa"):
        plan_semiconcave(prob0, v0_grid, setup0, [0.2], KappaSchedule("log", 1.0), 2.0, n_points=500)


# -- semi-convex pipeline


@pytest.fixture(scope="module")
def quad_grid(cfg0):
    g = BoxGrid((-3.0, -3.0), (3.0, 3.0), (241, 241))
    return ScalarField(g, example8.v0(g.nodes(), cfg0), order="cubic", name="V0")


@pytest.fixture(scope="module")
def semiconvex_plan(prob0, gentle_setup, quad_grid):
    return plan_semiconvex(prob0, quad_grid, gentle_setup, [0.2, 0.1], KappaSchedule("log", 4.0),
                           eps_max=0.2, n_points=500, sigma_kw={"n_centers": 200, "n_dirs": 16, "n_radii": 4})


def test_semiconvex_smooth_quadratic(semiconvex_plan):
    plan = semiconvex_plan
    plan.check_invariants()
    assert plan.constants["lambda0"] == 0.2
    for e in plan.accepted():
        assert 0.05 <= e.eps <= e.lam
        assert e.sigma["sigma1"] == 0.0
        assert e.tau_branch == "kappa"
        assert e.tau == pytest.approx(KappaSchedule("log", 4.0)(e.lam))


def test_semiconvex_surrogate_convex(semiconvex_plan):
    for e in semiconvex_plan.accepted():
        S = e.surrogate
        neg = ScalarField(S.grid, -S.values, order="linear")
        assert -semiconcavity_constant(neg) >= -1e-6


def test_semiconvex_rejects_large_lambda(prob0, gentle_setup, quad_grid):
    plan = plan_semiconvex(prob0, quad_grid, gentle_setup, [5.0], KappaSchedule("log", 4.0), eps_max=0.2,
                           bound="paper", n_points=200)
    assert not plan.entries[0].accepted and plan.entries[0].reason
    assert plan.constants.get("lambda0") is None


# -- Hoelder pipeline


def test_hoelder_rejects_small_alpha(prob0, gentle_setup, quad_grid):
    for a in (0.5, 0.3):
        with pytest.raises(PlanError, match="alpha"):
            plan_hoelder(prob0, quad_grid, gentle_setup, [0.1], KappaSchedule("power", 0.5), 2.0, alpha=a)


def test_hoelder_eps_cap(prob0, gentle_setup, quad_grid):
    plan = plan_hoelder(prob0, quad_grid, gentle_setup, [0.2, 0.01], KappaSchedule("power", 0.5), 2.0,
                        n_points=300, sigma_kw={"n_centers": 100, "n_dirs": 8, "n_radii": 2})
    by = {e.lam: e for e in plan.entries}
    assert by[0.2].accepted and by[0.2].eps <= 0.2
    assert not by[0.01].accepted and "0.01" in by[0.01].reason
    assert "eta_achieved" in by[0.2].extra


def test_hoelder_rejects_inadmissible_q(prob0, gentle_setup, quad_grid):
    # q outside (0, (2a-1)/(2-a)) = (0, 1) makes kappa(s) s^(2a-1)/(2-a) blow up
    with pytest.raises(PlanError, match="kappa"):
        plan_hoelder(prob0, quad_grid, gentle_setup, [0.2], KappaSchedule("power", 1.5), 2.0, n_points=300)
