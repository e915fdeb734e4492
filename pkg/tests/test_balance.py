import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcause.balance import (JointSample, InvalidMass, NonConvergence, TooLarge, cost_matrix,
                              entropic_ot, exact_transport, exact_transport_oracle, hsic,
                              hsic_permutation_null, product_sample, sinkhorn_divergence,
                              sinkhorn_wasserstein)
from netcause.engine import autodiff as ad
from netcause.engine.gradcheck import check_gradients


def _sample(rng, n, dim=2, mass=None):
    return JointSample(rng.normal(size=(n, dim)), rng.integers(0, 2, n), rng.random(n),
                       np.full(n, 1 / n) if mass is None else mass)


def test_mass_validation():
    with pytest.raises(InvalidMass):
        JointSample(np.zeros((2, 1)), [0, 1], [0, 1], [0.7, 0.7])
    with pytest.raises(InvalidMass):
        JointSample(np.zeros((2, 1)), [0, 1], [0, 1, 1], [0.5, 0.5])


def test_product_sample_preserves_pairs():
    rng = np.random.default_rng(0)
    s = _sample(rng, 30, mass=rng.dirichlet(np.ones(30)))
    p = product_sample(s, seed=3)
    assert np.array_equal(p.r, s.r)
    assert sorted(zip(p.t, p.z)) == sorted(zip(s.t, s.z))
    assert np.allclose(p.mass, 1 / 30)


def test_product_sample_two_units_frequency():
    s = JointSample.uniform(np.zeros((2, 1)), [0, 1], [0.0, 1.0])
    swapped = sum(product_sample(s, seed=k).t[0] == 1 for k in range(2000))
    # binomial(2000, 1/2) has sd ~ 22
    assert abs(swapped - 1000) < 100


def test_sinkhorn_identical_inputs_near_zero():
    rng = np.random.default_rng(1)
    a = _sample(rng, 20)
    d, plan = sinkhorn_wasserstein(a, a, eps=0.01, iters=2000)
    assert abs(d) <= 1e-3
    assert np.allclose(plan.coupling.sum(1), a.mass, atol=1e-6)


def test_two_points_unit_distance():
    a = JointSample.uniform([[0.0]], [0], [0.0])
    b = JointSample.uniform([[1.0]], [0], [0.0])
    d, plan = sinkhorn_wasserstein(a, b, eps=1e-3)
    assert d == pytest.approx(1.0, rel=0.02)
    assert plan.coupling[0, 0] == pytest.approx(1.0)


def test_exact_transport_hand_cases():
    half = np.array([0.5, 0.5])
    assert exact_transport(half, half, [[0.0, 1.0], [1.0, 0.0]])[0] == pytest.approx(0.0, abs=1e-12)
    a = JointSample.uniform([[0.0], [1.0]], [0, 0], [0, 0])
    b = JointSample.uniform([[0.5], [0.5]], [0, 0], [0, 0])
    assert exact_transport_oracle(a, b, metric="euclidean") == pytest.approx(0.5)
    assert exact_transport_oracle(a, a) == pytest.approx(0.0, abs=1e-12)


def test_exact_transport_too_large():
    with pytest.raises(TooLarge):
        exact_transport(np.full(70, 1 / 70), np.full(70, 1 / 70), np.zeros((70, 70)))


def test_sinkhorn_matches_lp():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 65))
        a, b = _sample(rng, n, 3), _sample(rng, n, 3)
        d, _ = sinkhorn_wasserstein(a, b, eps=1e-3, iters=2000)
        exact = exact_transport_oracle(a, b)
        worst = max(worst, abs(d - exact) / exact)
    assert worst <= 0.02


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 15), st.integers(3, 15))
def test_sinkhorn_symmetric_and_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    a = _sample(rng, n, mass=rng.dirichlet(np.ones(n)))
    b = _sample(rng, m, mass=rng.dirichlet(np.ones(m)))
    dab, plan = sinkhorn_wasserstein(a, b, eps=0.05, iters=3000, tol=1e-12)
    dba, _ = sinkhorn_wasserstein(b, a, eps=0.05, iters=3000, tol=1e-12)
    assert dab == pytest.approx(dba, abs=1e-9)
    assert dab >= -1e-9
    assert np.allclose(plan.coupling.sum(0), b.mass, atol=1e-6)
    daa, _ = sinkhorn_wasserstein(a, a, eps=0.05, iters=3000, tol=1e-12)
    assert daa <= dab + 1e-6


def test_divergence_gradient_wrt_points_and_mass():
    rng = np.random.default_rng(2)
    xa = ad.parameter(rng.normal(size=(6, 3)))
    logits = ad.parameter(rng.normal(size=(1, 6)))
    xb = rng.normal(size=(5, 3))

    def fn():
        mass = ad.reshape(ad.softmax_rows(logits), (-1,))
        return sinkhorn_divergence(xa, xb, mass, np.full(5, 0.2), eps=0.1, iters=2000, tol=1e-12)

    assert check_gradients(fn, {"xa": xa, "logits": logits}, h=1e-5) <= 1e-3


def test_nonconvergence_warns():
    rng = np.random.default_rng(3)
    C = rng.random((10, 10)) * 50
    with pytest.warns(NonConvergence):
        entropic_ot(C, np.full(10, 0.1), np.full(10, 0.1), eps=1e-3, iters=2)


def test_warm_start_reuses_potentials():
    rng = np.random.default_rng(4)
    C = cost_matrix(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)))
    m = np.full(8, 1 / 8)
    cache = {}
    cold = entropic_ot(C, m, m, eps=0.05, iters=5000, tol=1e-13, cache=cache).item()
    info = {}
    warm = entropic_ot(C, m, m, eps=0.05, cache=cache, warm_iters=30, info=info).item()
    assert warm == pytest.approx(cold, abs=1e-8)
    assert info["iterations"] <= 30


def test_hsic_constant_is_zero():
    rng = np.random.default_rng(5)
    assert hsic(rng.normal(size=(20, 2)), np.ones((20, 1))) == pytest.approx(0.0, abs=1e-10)


def test_hsic_detects_dependence():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(80, 2))
    null = hsic_permutation_null(X, X, n_perm=200, seed=1)
    assert hsic(X, X) > np.quantile(null, 0.99)


def test_hsic_independent_not_significant():
    rng = np.random.default_rng(7)
    X, Y = rng.normal(size=(80, 2)), rng.normal(size=(80, 1))
    null = hsic_permutation_null(X, Y, n_perm=200, seed=2)
    assert hsic(X, Y) <= np.quantile(null, 0.95)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_hsic_nonnegative_weighted(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 30))
    val = hsic(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.dirichlet(np.ones(n)))
    assert val >= -1e-10


def test_hsic_uniform_matches_trace_formula():
    rng = np.random.default_rng(8)
    X, Y = rng.normal(size=(15, 2)), rng.normal(size=(15, 1))
    n = 15

    def gram(A):
        d = np.sqrt(((A[:, None, :] - A[None, :, :]) ** 2).sum(-1))
        s = np.median(d[np.triu_indices(n, 1)])
        return np.exp(-d ** 2 / (2 * s * s))

    H = np.eye(n) - 1 / n
    expected = np.trace(gram(X) @ H @ gram(Y) @ H) / n ** 2
    assert hsic(X, Y) == pytest.approx(expected, rel=1e-10)
