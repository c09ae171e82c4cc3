import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from case_tal import ot_core
from case_tal.errors import ConvergenceError, InputError, ShapeError


def random_instance(rng, with_prior=True, zero_col=False):
    N = int(rng.integers(1, 9))
    K = int(rng.integers(1, 6))
    L = rng.normal(size=(N, K))
    beta = rng.dirichlet(np.ones(K))
    if zero_col and K > 1:
        beta[int(rng.integers(K))] = 0.0
        beta /= beta.sum()
    prior = rng.uniform(0.2, 2.0, size=(N, K)) if with_prior else None
    eps = float(rng.uniform(0.5, 5.0))
    return L, beta, prior, eps


# --- examples ---------------------------------------------------------------

def test_zero_logits_give_uniform_plan():
    Q = ot_core.sinkhorn(np.zeros((5, 4)), None, None, 20.0, 3)
    assert np.allclose(Q, 0.25, atol=1e-12)


def test_sharp_diagonal_instance_is_identity():
    L = np.array([[10.0, 0.0], [0.0, 10.0]])
    Q = ot_core.sinkhorn(L, [0.5, 0.5], None, 20.0, 50)
    assert np.allclose(Q, np.eye(2), atol=1e-6)
    assert np.allclose(ot_core.ot_dual_oracle(L, [0.5, 0.5], None, 20.0), np.eye(2), atol=1e-6)


def test_unbalanced_instance_matches_oracle():
    L = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    beta = [2 / 3, 1 / 3]
    Q = ot_core.sinkhorn(L, beta, None, 1.0, 200)
    ref = ot_core.ot_dual_oracle(L, beta, None, 1.0)
    assert np.max(np.abs(Q - ref)) <= 1e-6


def test_vanishing_sharpening_follows_prior():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(6, 2)) * 5
    prior = np.tile([0.9, 0.1], (6, 1))
    Q = ot_core.sinkhorn(L, [0.9, 0.1], prior, 1e-6, 50)
    assert np.allclose(Q, prior, atol=1e-4)


def test_oracle_degenerate_marginal():
    Q = ot_core.ot_dual_oracle(np.array([[0.3, -1.0], [2.0, 0.1]]), [1.0, 0.0], None, 20.0)
    assert np.allclose(Q, [[1.0, 0.0], [1.0, 0.0]])
    Q2 = ot_core.sinkhorn(np.array([[0.3, -1.0], [2.0, 0.1]]), [1.0, 0.0], None, 20.0, 3)
    assert np.allclose(Q2, [[1.0, 0.0], [1.0, 0.0]])


def test_oracle_uniform():
    assert np.allclose(ot_core.ot_dual_oracle(np.zeros((3, 4))), 0.25)


@pytest.mark.parametrize("dist,expected", [
    ([0.5, 0.5], np.log(2)),
    ([1.0, 0.0, 0.0], 0.0),
    (np.full(16, 1 / 16), np.log(16)),
])
def test_entropy_examples(dist, expected):
    assert ot_core.entropy(dist) == pytest.approx(expected, abs=1e-12)


def test_entropy_matrix_is_mean_row_entropy():
    m = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert ot_core.entropy(m) == pytest.approx(np.log(2) / 2)


def test_entropy_rejects_negative():
    with pytest.raises(InputError):
        ot_core.entropy([0.5, -0.1])


def test_kl_examples():
    q = np.array([0.3, 0.7])
    assert ot_core.kl_divergence(q, q) == pytest.approx(0.0, abs=1e-15)
    assert ot_core.kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(np.log(2))
    expected = 0.8 * np.log(1.6) + 0.2 * np.log(0.4)
    assert ot_core.kl_divergence([0.8, 0.2], [0.5, 0.5]) == pytest.approx(expected)
    assert expected == pytest.approx(0.1927, abs=1e-4)


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        ot_core.kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


# --- errors -----------------------------------------------------------------

@pytest.mark.parametrize("kwargs,exc", [
    (dict(logits=[[np.nan, 0.0]]), InputError),
    (dict(logits=[[0.0, 0.0]], beta=[0.5, 0.2, 0.3]), ShapeError),
    (dict(logits=[[0.0, 0.0]], beta=[-0.5, 1.5]), InputError),
    (dict(logits=[[0.0, 0.0]], beta=[0.5, 0.6]), InputError),
    (dict(logits=[[0.0, 0.0]], prior=[[1.0, 0.0]]), InputError),
    (dict(logits=[[0.0, 0.0]], prior=[[1.0, 1.0], [1.0, 1.0]]), ShapeError),
    (dict(logits=[[0.0, 0.0]], eps_sharp=0.0), InputError),
    (dict(logits=[[0.0, 0.0]], n_iter=0), InputError),
])
def test_sinkhorn_rejects_bad_input(kwargs, exc):
    with pytest.raises(exc):
        ot_core.sinkhorn(**kwargs)


def test_oracle_iteration_cap():
    L = np.random.default_rng(0).normal(size=(6, 4)) * 3
    with pytest.raises(ConvergenceError):
        ot_core.ot_dual_oracle(L, None, None, 20.0, max_iter=1)


def test_extreme_logits_stay_finite():
    L = np.array([[1e3, -1e3], [-1e3, 1e3]])
    Q = ot_core.sinkhorn(L, None, None, 20.0, 3)
    assert np.all(np.isfinite(Q))
    assert np.allclose(Q, np.eye(2))


# --- properties -------------------------------------------------------------

def test_marginals_after_fifty_iterations():
    rng = np.random.default_rng(11)
    for _ in range(50):
        L, beta, prior, eps = random_instance(rng, zero_col=True)
        Q = ot_core.sinkhorn(L, beta, prior, eps, 2000)
        N = L.shape[0]
        assert np.max(np.abs(Q.sum(axis=1) - 1)) <= 1e-6
        assert np.max(np.abs(Q.sum(axis=0) - N * beta)) <= 1e-6 * N
        assert np.all(Q >= 0)


def test_zero_beta_columns_are_empty():
    L = np.random.default_rng(2).normal(size=(4, 3))
    Q = ot_core.sinkhorn(L, [0.5, 0.0, 0.5], None, 2.0, 3)
    assert np.all(Q[:, 1] == 0)


def test_shift_invariance():
    rng = np.random.default_rng(5)
    L, beta, prior, eps = random_instance(rng)
    a = ot_core.sinkhorn(L, beta, prior, eps, 500)
    b = ot_core.sinkhorn(L + 7.3, beta, prior, eps, 500)
    assert np.max(np.abs(a - b)) <= 1e-8


def test_prior_scale_is_irrelevant():
    rng = np.random.default_rng(6)
    L, beta, prior, eps = random_instance(rng)
    assert np.allclose(ot_core.sinkhorn(L, beta, prior, eps, 20),
                       ot_core.sinkhorn(L, beta, 1e-3 * prior, eps, 20), atol=1e-12)


def test_factorization_residual_of_converged_plan():
    rng = np.random.default_rng(8)
    for _ in range(20):
        L, beta, prior, eps = random_instance(rng)
        Q = ot_core.sinkhorn(L, beta, prior, eps, 500)
        assert ot_core.factorization_residual(Q, L, prior, eps) <= 1e-6


def test_factorization_residual_detects_perturbation():
    L = np.random.default_rng(9).normal(size=(4, 3))
    Q = ot_core.sinkhorn(L, None, None, 2.0, 200)
    Q[1, 2] *= 1.05
    assert ot_core.factorization_residual(Q, L, None, 2.0) == pytest.approx(0.05, rel=1e-6)


def test_dual_bound_is_monotone_and_tight():
    # Sinkhorn is block coordinate ascent on the dual, so the dual bound never
    # decreases and converges to the optimal primal objective.
    rng = np.random.default_rng(12)
    for _ in range(30):
        L, beta, prior, eps = random_instance(rng, with_prior=bool(rng.integers(2)))
        trace = ot_core.dual_bound_trace(L, beta, prior, eps, 300)
        assert np.all(np.diff(trace) >= -1e-12)
        Q = ot_core.ot_dual_oracle(L, beta, prior, eps)
        opt = ot_core.ot_objective(Q, L, prior, eps)
        assert trace[-1] == pytest.approx(opt, abs=1e-8)


def test_distance_to_optimum_is_non_increasing():
    rng = np.random.default_rng(13)
    L, beta, prior, eps = random_instance(rng)
    opt = ot_core.ot_dual_oracle(L, beta, prior, eps)
    dists = [ot_core.kl_divergence(opt + 0.0, ot_core.sinkhorn(L, beta, prior, eps, t) + 1e-300)
             for t in range(1, 30)]
    assert np.all(np.diff(dists) <= 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_plan_is_row_stochastic_for_any_iteration_count(N, K, seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(N, K)) * 3
    Q = ot_core.sinkhorn(L, rng.dirichlet(np.ones(K)), None, 20.0, int(rng.integers(1, 5)))
    assert np.allclose(Q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(Q >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_oracle_agreement_property(seed):
    rng = np.random.default_rng(seed)
    L, beta, prior, eps = random_instance(rng, with_prior=bool(seed % 2))
    Q = ot_core.sinkhorn(L, beta, prior, eps, 2000)
    assert np.max(np.abs(Q - ot_core.ot_dual_oracle(L, beta, prior, eps))) <= 1e-5
