import itertools
import json

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from netcause.theory import (DiscreteScenario, InvalidScenario, audit, check_lemma1,
                             check_theorem1_and_3, check_theorem2, diameter, exact_losses,
                             lipschitz_constant, odds_ratio_bound, random_scenario,
                             reweighted_covariates, w1_dual_bruteforce, w1_lp,
                             write_theory_report)


def _perfect(s):
    return replace(s, h=s.m.copy(), noise=np.zeros_like(s.noise))


def _oracle_estimates(s):
    return replace(s, e_eta=s.e.copy(), phi_eta=s.phi.copy())


def test_scenario_validation():
    s = random_scenario(0)
    with pytest.raises(InvalidScenario):
        replace(s, px=s.px * 2)
    with pytest.raises(InvalidScenario):
        replace(s, e=np.where(np.arange(len(s.e)) == 0, 1.0, s.e))


def test_perfect_hypothesis_has_zero_losses():
    L = exact_losses(_perfect(random_scenario(1)))
    assert L["eps_F"] == L["eps_CF"] == L["eps_PEHE"] == 0.0


def test_single_point_no_shift():
    s = random_scenario(2, nx=1, nz=2)
    L = exact_losses(s)
    assert L["eps_F"] == pytest.approx(L["eps_CF"], abs=1e-15)


def _hand_scenario():
    # two covariate points, two treatment pairs (t in {0, 1}, one exposure level)
    return DiscreteScenario(
        px=np.array([0.25, 0.75]), rep=np.array([[0.0], [1.0]]), z_levels=np.array([0.5]),
        e=np.array([0.2, 0.6]), phi=np.ones((2, 1)),
        m=np.array([[[1.0], [2.0]], [[0.0], [3.0]]]),
        h=np.array([[[1.5], [2.0]], [[0.0], [2.0]]]),
        noise=np.array([[[0.1], [0.0]], [[0.2], [0.0]]]),
        e_eta=np.array([0.2, 0.6]), phi_eta=np.ones((2, 1)))


def test_hand_two_by_two():
    L = exact_losses(_hand_scenario())
    # per-cell losses (m - h)^2 + noise: x0: (0.25 + 0.1, 0); x1: (0.2, 1)
    # p(x, t): x0: (0.2, 0.05); x1: (0.3, 0.45);  p(t) = (0.5, 0.5)
    assert L["eps_F"] == pytest.approx(0.2 * 0.35 + 0.3 * 0.2 + 0.45 * 1.0)
    assert L["eps_CF"] == pytest.approx(0.5 * (0.25 * 0.35 + 0.75 * 0.2) + 0.5 * (0.75 * 1.0))
    assert L["sigma_Y"] == pytest.approx(0.5 * (0.25 * 0.1 + 0.75 * 0.2))
    # effect error (h1 - m1) - (h0 - m0): x0: -0.5, x1: -1; the two ordered couples that differ
    # each carry p(t) p(t') = 0.25
    assert L["eps_PEHE"] == pytest.approx(2 * 0.25 * (0.25 * 0.25 + 0.75 * 1.0))
    # oracle weights reproduce the counterfactual loss
    assert L["eps_F_eta"] == pytest.approx(L["eps_CF"])


def _loop_losses(s):
    """The same quantities by explicit loops over cells."""
    nx, nz = s.phi.shape
    p_tz = {}
    for t, j in itertools.product((0, 1), range(nz)):
        p_tz[t, j] = sum(s.px[i] * (s.e[i] if t else 1 - s.e[i]) * s.phi[i, j] for i in range(nx))
    loss = lambda i, t, j: (s.m[i, t, j] - s.h[i, t, j]) ** 2 + s.noise[i, t, j]
    psi = lambda e, phi, i, t, j: (e[i] if t else 1 - e[i]) * phi[i, j]
    eps_f = sum(s.px[i] * psi(s.e, s.phi, i, t, j) * loss(i, t, j)
                for i in range(nx) for t in (0, 1) for j in range(nz))
    eps_cf = sum(s.px[i] * p_tz[t, j] * loss(i, t, j)
                 for i in range(nx) for t in (0, 1) for j in range(nz))
    eps_eta = 0.0
    for t, j in p_tz:
        q = [s.px[i] * psi(s.e, s.phi, i, t, j) / psi(s.e_eta, s.phi_eta, i, t, j)
             for i in range(nx)]
        eps_eta += p_tz[t, j] * sum(q[i] * loss(i, t, j) for i in range(nx)) / sum(q)
    return eps_f, eps_cf, eps_eta


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_exact_losses_match_loops(seed):
    s = random_scenario(seed)
    L = exact_losses(s)
    f, cf, eta = _loop_losses(s)
    assert L["eps_F"] == pytest.approx(f, rel=1e-12)
    assert L["eps_CF"] == pytest.approx(cf, rel=1e-12)
    assert L["eps_F_eta"] == pytest.approx(eta, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_true_weights_balance_every_cell(seed):
    s = random_scenario(seed)
    q = reweighted_covariates(s, "true")
    assert np.max(np.abs(q - s.px[:, None, None])) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 100_000))
def test_lp_matches_bruteforce_dual(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    assert w1_lp(pts, p, q) == pytest.approx(w1_dual_bruteforce(pts, p, q), abs=1e-9)


def test_w1_line_by_hand():
    pts = np.array([[0.0], [1.0], [3.0]])
    # move 0.5 mass from 0 to 3: cost 1.5
    assert w1_lp(pts, [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]) == pytest.approx(1.5)


def test_lipschitz_and_diameter():
    pts = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    assert diameter(pts) == 5.0
    # slopes 5/5, 2/1 and 3/sqrt(18)
    assert lipschitz_constant(pts, [0.0, 5.0, 2.0]) == pytest.approx(2.0)


def test_odds_ratio_known_shift():
    e = np.array([0.3, 0.6])
    e_eta = 1 / (1 + np.exp(-(np.log(e / (1 - e)) + np.array([0.5, -0.2]))))
    assert odds_ratio_bound(e, e_eta) == pytest.approx(np.exp(0.5))


def test_lemma1_perfect_weights():
    r = check_lemma1(_oracle_estimates(random_scenario(3)))
    assert r.terms["ipm"] == pytest.approx(0.0, abs=1e-12)
    assert r.lhs == pytest.approx(r.terms["eps_F_eta"], rel=1e-12)
    assert r.passed


def test_lemma1_zero_hypothesis_single_pair():
    s = random_scenario(4, nx=3, nz=1)
    s = replace(s, h=np.zeros_like(s.h), noise=np.zeros_like(s.noise), e=np.full(3, 0.5),
                e_eta=np.full(3, 0.5))
    r = check_lemma1(s)
    # treatment independent of x: every loss is E_x[m^2] under p(x)
    expected = float(np.einsum("x,xtz->", s.px, s.m ** 2) / 2)
    assert r.lhs == pytest.approx(expected)
    assert r.rhs == pytest.approx(expected)


def test_theorem2_perfect_estimation():
    r = check_theorem2(_oracle_estimates(random_scenario(5)))
    assert r.rhs == 0.0
    assert r.lhs == pytest.approx(0.0, abs=1e-12)


def test_theorem2_known_gamma():
    s = _oracle_estimates(random_scenario(6, nx=4, nz=2))
    logit = np.log(s.e / (1 - s.e)) + 0.5
    s = replace(s, e_eta=1 / (1 + np.exp(-logit)))
    r = check_theorem2(s)
    assert r.terms["gamma_t"] == pytest.approx(np.exp(0.5))
    assert r.terms["gamma_z"] == pytest.approx(1.0)
    assert r.rhs == pytest.approx(diameter(s.rep) * np.sqrt(0.5))
    assert r.passed


def test_perfect_hypothesis_chain_is_zero():
    thm1, _ = check_theorem1_and_3(_perfect(random_scenario(7)))
    assert thm1.chain[0] == 0.0 and thm1.chain[1] == 0.0
    assert thm1.passed


def test_audit_and_report(tmp_path):
    reports = audit(n_scenarios=10, seed=3)
    assert len(reports) == 40
    assert all(r.passed for r in reports)
    payload = json.loads(write_theory_report(reports, tmp_path / "t.json").read_text())
    assert payload["violations"] == 0
    assert {"inequality", "lhs", "rhs", "slack", "scenario_seed"} <= set(payload["reports"][0])


def test_failed_report_dumps_scenario():
    r = check_lemma1(random_scenario(8))
    r.chain = [1.0, 0.0]
    d = r.to_dict()
    assert not d["passed"]
    assert "px" in d["scenario"]
    assert "scenario" not in check_lemma1(random_scenario(8)).to_dict()
