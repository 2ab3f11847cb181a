import numpy as np
import pytest

from smoothfeedback import example8
from smoothfeedback.certify import (DIV_GUARD, BoundCertificate, LyapunovSetup, _guarded_ratio, certificates_csv,
                                    certify_linfty, certify_lp, divergence_bound, escape_bound_a,
                                    jacobian_volume_check, sigma_quantities, supersolution_violation,
                                    trajectory_convergence_check)
from smoothfeedback.core import Ball, BoxGrid, ControlProblem, ScalarField, ValidationError
from smoothfeedback.synthesis import feedback_from, law_from_map


def _free(dim=2):
    """f = 0, B = I, ell = 0, beta = 1."""
    return ControlProblem(f=lambda Y: np.zeros_like(Y), B=lambda Y: np.broadcast_to(np.eye(dim), (len(Y), dim, dim)),
                          ell=lambda Y: np.zeros(len(Y)), beta=1.0, dim=dim, ctrl_dim=dim)


@pytest.fixture(scope="module")
def cone_setup():
    """w = 2|y|, omega = B(0, 1), delta = 0.1: |grad w| = 2 on omega_delta."""
    w = lambda Y: 2 * np.linalg.norm(np.atleast_2d(Y), axis=1)  # noqa: E731
    gw = lambda Y: 2 * np.atleast_2d(Y) / np.linalg.norm(np.atleast_2d(Y), axis=1)[:, None]  # noqa: E731
    return LyapunovSetup(w, gw, Ball([0.0, 0.0], 1.0), 0.1, ((-1.5, -1.5), (1.5, 1.5)))


@pytest.fixture(scope="module")
def quad_setup():
    w = lambda Y: 0.5 * np.sum(np.atleast_2d(Y) ** 2, axis=1)  # noqa: E731
    return LyapunovSetup(w, lambda Y: np.atleast_2d(Y), Ball([0.0, 0.0], 1.0), 0.5, ((-1.6, -1.6), (1.6, 1.6)))


# -- setup


def test_setup_validation():
    w = lambda Y: np.sum(np.atleast_2d(Y) ** 2, axis=1)  # noqa: E731
    with pytest.raises(ValidationError, match="delta"):
        LyapunovSetup(w, lambda Y: 2 * Y, Ball([0, 0], 1.0), 0.0, ((-2, -2), (2, 2)))
    with pytest.raises(ValidationError, match="bbox"):
        LyapunovSetup(w, lambda Y: 2 * Y, Ball([0, 0], 1.0), 5.0, ((-2, -2), (2, 2)))
    with pytest.raises(ValidationError, match="g"):
        LyapunovSetup(w, lambda Y: 2 * Y, Ball([0, 0], 1.0), 0.5, ((-2, -2), (2, 2)), g=lambda Y: -np.ones(len(Y)))


def test_supersolution_pointwise(quad_setup):
    P = quad_setup.sample_delta(2000)
    assert supersolution_violation(quad_setup, _free(), lambda Y: Y, P) == 0.0
    assert supersolution_violation(quad_setup, _free(), lambda Y: -Y, P) == 1.0


# -- sigma quantities


def test_sigma_on_quadratic_w(quad_setup):
    prev = None
    for eps in (0.2, 0.1, 0.05, 0.01):
        sq = sigma_quantities(quad_setup, _free(), eps, n_centers=300, n_dirs=16)
        assert sq.sigma1 == 0.0
        assert sq.sigma2 <= eps * (1 + 1e-12)
        if prev is not None:
            assert sq.sigma2 <= prev
        prev = sq.sigma2
    assert prev < 0.011


def test_sigma_on_benchmark_setup(setup0, cfg0):
    prob = example8.problem(cfg0)
    s2 = [sigma_quantities(setup0, prob, eps, n_centers=300, n_dirs=16).sigma2 for eps in (0.2, 0.1, 0.05)]
    assert np.all(np.isfinite(s2)) and s2[0] > s2[1] > s2[2] > 0


def test_sigma_domain_guard(quad_setup):
    g = BoxGrid((-1.5, -1.5), (1.5, 1.5), (31, 31))
    with pytest.raises(ValidationError, match="eps"):
        sigma_quantities(quad_setup, _free(), 0.5, domain=g)


# -- escape bounds


def test_escape_a_formula_is_tight(cone_setup):
    prob = _free()
    law = law_from_map(lambda Y: np.tile([0.05, 0.0], (len(np.atleast_2d(Y)), 1)), prob)
    zero = law_from_map(lambda Y: np.zeros_like(np.atleast_2d(Y)), prob)
    cert = escape_bound_a(cone_setup, prob, law, zero, n_points=4000, n_starts=64)
    assert cert.rhs == pytest.approx(1.0, rel=1e-12)
    # from (1, 0) the drift raises w by 0.1 per unit time: escape at exactly t = 1
    assert cert.lhs == pytest.approx(1.0, abs=1e-8)
    assert cert.verdict


def test_escape_a_equal_laws_guarded(cone_setup):
    prob = _free()
    zero = law_from_map(lambda Y: np.zeros_like(np.atleast_2d(Y)), prob)
    cert = escape_bound_a(cone_setup, prob, zero, zero, n_points=1000, n_starts=16, tau_max=2.0)
    assert np.isinf(cert.rhs) and np.isinf(cert.lhs) and cert.verdict
    assert any("vacuous" in n for n in cert.notes)


def test_guarded_formulas():
    assert _guarded_ratio(0.1, 0.01 + 0.02 * 1.0 / 1.0)[0] == pytest.approx(0.1 / 0.03)
    assert round(_guarded_ratio(0.1, 0.03)[0], 3) == 3.333
    assert _guarded_ratio(0.2, 0.05 + 0.0)[0] == pytest.approx(4.0)
    assert _guarded_ratio(1.0, DIV_GUARD / 2) == (np.inf, True)


def test_escape_reproducible(cone_setup):
    prob = _free()
    law = law_from_map(lambda Y: 0.05 * np.atleast_2d(Y), prob)
    zero = law_from_map(lambda Y: np.zeros_like(np.atleast_2d(Y)), prob)
    a = escape_bound_a(cone_setup, prob, law, zero, n_points=1000, n_starts=32, seed=3)
    b = escape_bound_a(cone_setup, prob, law, zero, n_points=1000, n_starts=32, seed=3)
    assert a.to_json() == b.to_json()


# -- value-error certificates


def test_linfty_exact_law(cfg0, v0_exact):
    prob = example8.problem(cfg0)
    law = feedback_from(v0_exact, prob)
    cert = certify_linfty(prob, v0_exact, law, 1.0, Ball([0, 0], 2.0), Ball([0, 0], 4.0), n_starts=100)
    assert cert.rhs == 0.0 and cert.lhs <= 1e-8 and cert.verdict


def test_linfty_corrupted_law(cfg0, v0_exact):
    prob = example8.problem(cfg0)
    bad = law_from_map(lambda Y: np.atleast_2d(Y), prob)
    cert = certify_linfty(prob, v0_exact, bad, 1.0, Ball([0, 0], 2.0), Ball([0, 0], 4.0), n_starts=100)
    assert not cert.verdict and not cert.valid and cert.notes
    # inside its hypotheses the estimate still holds: the certificate is a theorem
    ok = certify_linfty(prob, v0_exact, bad, 0.5, Ball([0, 0], 1.0), Ball([0, 0], 4.0), n_starts=100)
    assert ok.valid and ok.verdict and ok.lhs > 0


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_lp_equal_laws(cfg0, p):
    prob = example8.problem(cfg0)
    g = BoxGrid((-3.0, -3.0), (3.0, 3.0), (61, 61))
    v = ScalarField(g, example8.v0(g.nodes(), cfg0), order="cubic")
    cert = certify_lp(prob, v, feedback_from(v, prob), 1.0, Ball([0, 0], 1.5), Ball([0, 0], 2.9), p)
    assert cert.lhs <= 1e-6 and cert.verdict
    assert cert.constants["C"] == pytest.approx(2.0, abs=1e-6)
    assert any("boundary" in n for n in cert.notes)
    with pytest.raises(ValidationError, match="p"):
        certify_lp(prob, v, feedback_from(v, prob), 1.0, Ball([0, 0], 1.5), Ball([0, 0], 2.9), 0.5)


def test_jacobian_contraction_flow():
    prob = _free()
    law = law_from_map(lambda Y: -np.atleast_2d(Y), prob)
    T = 1.0
    omega, Omega1 = Ball([0, 0], 1.0), Ball([0, 0], 1.5)
    cert = jacobian_volume_check(prob, law, omega, Omega1, T, lambda Y: np.ones(len(Y)), samples=4000)
    assert cert.lhs == pytest.approx(T * np.pi, rel=1e-12)
    assert cert.constants["K"] == pytest.approx(2.0, abs=1e-8)
    assert cert.rhs >= cert.lhs + 3 * cert.constants["sigma"] and cert.status == "pass"
    assert divergence_bound(prob, law, omega.sample(100, np.random.default_rng(0))) == pytest.approx(2.0)
    zero = jacobian_volume_check(prob, law, omega, Omega1, T, lambda Y: np.zeros(len(Y)), samples=500)
    assert zero.lhs == 0.0 and zero.rhs == 0.0 and zero.verdict


def test_certificate_serialization():
    c = BoundCertificate("x", "ref", 1.0, 0.5)
    assert c.slack == 0.5 and c.verdict
    low = BoundCertificate("y", "ref", 2.0, 1.0, relation="lower")
    assert low.slack == -1.0 and not low.verdict
    text = certificates_csv([c, low])
    assert text.splitlines()[0].startswith("# quantity") and text.splitlines()[1] == ",".join(c.CSV_HEADER)


# -- trajectory convergence


def test_convergence_to_analytic_reference(cfg0, v0_exact):
    prob = example8.problem(cfg0)
    y0 = np.array([1.0, 0.0])
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
    laws = {eps: (law_from_map(lambda Y, e=eps: -np.atleast_2d(Y) + e * np.atleast_2d(Y) @ rot.T, prob), 3.0)
            for eps in (0.2, 0.1, 0.05, 0.025)}
    ref = lambda t: np.exp(-t)[:, None] * y0  # noqa: E731
    rep = trajectory_convergence_check(prob, laws, y0, v0_exact, reference=ref)
    assert rep.mode == "full" and rep.distance_decreasing and rep.cost_decreasing
    assert rep.distances[-1] < rep.distances[0] / 4
    exact = {eps: (feedback_from(v0_exact, prob), 3.0) for eps in (0.2, 0.1)}
    rep = trajectory_convergence_check(prob, exact, y0, v0_exact, reference=ref)
    assert max(rep.distances) < 1e-8


def test_convergence_cost_only_when_not_unique(cfg0, v0_exact):
    prob = example8.problem(cfg0)
    laws = {0.1: (feedback_from(v0_exact, prob), 2.0)}
    rep = trajectory_convergence_check(prob, laws, [1.0, 0.0], v0_exact, reference=None, unique=False)
    assert rep.mode == "cost-only" and rep.distance_decreasing is None and rep.notes
