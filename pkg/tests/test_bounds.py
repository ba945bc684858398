import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obdlab.bounds import (
    check_assumption1,
    check_instance,
    corollary1_bound,
    crossovers,
    distribution_gap,
    error_report,
    figure4_sweep,
    partition_states,
    pivotal_error,
    surrounding_error,
    theorem1_bound,
    theorem3_bound,
    verify_bounds,
)
from obdlab.errors import DomainError
from obdlab.mdp import (
    TabularMDP,
    TabularPolicy,
    exact_return,
    random_mdp,
    sample_rollouts,
    state_distributions,
    value_iteration,
)


def two_action_chain(n, horizon):
    """Action 0 advances along the chain, action 1 stays; reward 1 for advancing."""
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, 0, min(s + 1, n - 1)] = 1.0
        P[s, 1, s] = 1.0
    r = np.zeros((n, 2))
    r[:, 0] = 1.0
    return TabularMDP(P, r, horizon, np.eye(n)[0])


def trap_mdp(horizon=4):
    """State 2 is an absorbing trap the expert never enters."""
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    P[0, 1, 2] = P[1, 1, 2] = 1.0
    P[2, :, 2] = 1.0
    r = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    return TabularMDP(P, r, horizon, np.eye(3)[0])


def perturbed(rng, S, A, T):
    mdp = random_mdp(rng, S, A, T, branching=2, init_support=2)
    pi_star, _ = value_iteration(mdp)
    pi_hat = pi_star.mix(TabularPolicy(rng.dirichlet(np.ones(A), size=(T, S))), rng.random())
    return mdp, pi_star, pi_hat


# -- partition -----------------------------------------------------------------


def test_chain_partition():
    mdp = two_action_chain(6, 3)
    pi_star = TabularPolicy.deterministic(np.zeros(6, int), 2)
    part = partition_states(mdp, pi_star)
    assert part.pivotal == {0, 1, 2}
    assert part.surrounding == {3, 4, 5}


def test_uniform_full_support_has_no_surrounding():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 5, 3, 4)
    part = partition_states(mdp, TabularPolicy.uniform(5, 3))
    assert part.surrounding == frozenset()
    assert part.pivotal == set(range(5))


def test_hand_built_unvisited_state_is_surrounding():
    P = np.zeros((5, 2, 5))
    for s in range(4):
        P[s, 0, (s + 1) % 4] = 1.0  # action 0 cycles through 0..3
        P[s, 1, 4] = 1.0
    P[4, :, 4] = 1.0
    mdp = TabularMDP(P, np.zeros((5, 2)), 6, np.eye(5)[0])
    pi_star = TabularPolicy.deterministic(np.zeros(5, int), 2)
    # exact occupancy: state 4 has zero mass at every step
    assert state_distributions(mdp, pi_star).average[4] == 0.0
    part = partition_states(mdp, pi_star)
    assert 4 in part.surrounding
    assert part.pivotal == {0, 1, 2, 3}


# -- pivotal error ----------------------------------------------------------------


def test_identical_policies_have_zero_pivotal_error():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, 6, 3, 5)
    pi, _ = value_iteration(mdp)
    eps, eps_t = pivotal_error(mdp, pi, pi)
    assert eps == 0.0 and np.all(eps_t == 0.0)


def test_disjoint_deterministic_policies_have_error_two():
    mdp = two_action_chain(5, 4)
    pi_star = TabularPolicy.deterministic(np.zeros(5, int), 2)
    pi_hat = TabularPolicy.deterministic(np.ones(5, int), 2)
    eps, eps_t = pivotal_error(mdp, pi_star, pi_hat)
    np.testing.assert_array_equal(eps_t, 2.0)
    assert eps == 2.0


def test_pivotal_error_matches_summation_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mdp, pi_star, pi_hat = perturbed(rng, 6, 3, 5)
        d = state_distributions(mdp, pi_star).dist
        oracle_t = []
        for k in range(mdp.horizon):
            total = 0.0
            for s in range(mdp.n_states):
                for a in range(mdp.n_actions):
                    total += d[k, s] * abs(pi_hat.at(k)[s, a] - pi_star.at(k)[s, a])
            oracle_t.append(total)
        eps, eps_t = pivotal_error(mdp, pi_star, pi_hat)
        np.testing.assert_allclose(eps_t, oracle_t, atol=1e-12)
        assert eps == pytest.approx(sum(oracle_t) / mdp.horizon, abs=1e-12)


# -- surrounding error --------------------------------------------------------------


def test_surrounding_error_zero_when_never_leaving_pivotal():
    mdp = two_action_chain(6, 4)
    pi_star = TabularPolicy.deterministic(np.zeros(6, int), 2)
    eps_mu, eps_mu_t = surrounding_error(mdp, pi_star, pi_star)
    assert eps_mu == 0.0 and np.all(eps_mu_t == 0.0)


def test_trap_gives_unit_surrounding_error_after_entry():
    mdp = trap_mdp(horizon=5)
    pi_star = TabularPolicy.deterministic(np.zeros(3, int), 2)
    pi_hat = TabularPolicy.deterministic(np.ones(3, int), 2)
    assert partition_states(mdp, pi_star).surrounding == {2}
    eps_mu, eps_mu_t = surrounding_error(mdp, pi_star, pi_hat)
    # step 1 starts pivotal (empty event -> 0); from step 2 on pi^ sits in the trap
    np.testing.assert_array_equal(eps_mu_t, [0.0, 1.0, 1.0, 1.0])
    assert eps_mu == pytest.approx(0.75)


def test_surrounding_error_matches_monte_carlo():
    rng = np.random.default_rng(17)
    P = np.zeros((4, 2, 4))
    P[0, 0] = [0, 1, 0, 0]
    P[1, 0] = [1, 0, 0, 0]
    P[0, 1] = [0, 0.3, 0.7, 0]
    P[1, 1] = [0, 0, 0.5, 0.5]
    P[2, :] = [0.4, 0, 0.3, 0.3]
    P[3, :] = [0, 0.2, 0.5, 0.3]
    mdp = TabularMDP(P, rng.uniform(-1, 1, (4, 2)), 6, np.eye(4)[0])
    pi_star = TabularPolicy.deterministic(np.zeros(4, int), 2)
    pi_hat = TabularPolicy(np.array([[0.6, 0.4], [0.5, 0.5], [0.3, 0.7], [0.8, 0.2]]))
    sur = partition_states(mdp, pi_star).mask(4)
    assert sur.tolist() == [False, False, True, True]
    _, eps_mu_t = surrounding_error(mdp, pi_star, pi_hat)
    traj = sample_rollouts(mdp, pi_hat, 100_000, seed=3)
    for k in range(mdp.horizon - 1):
        cond = sur[traj.states[:, k]]
        p = eps_mu_t[k]
        if k == 0:
            assert not cond.any() and p == 0.0
            continue
        stay = sur[traj.states[:, k + 1]][cond]
        sigma = math.sqrt(p * (1 - p) / cond.sum())
        assert abs(stay.mean() - p) <= 3 * sigma


# -- assumption 1 ---------------------------------------------------------------


def test_assumption_holds_for_identical_policies():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, 5, 2, 6)
    pi, _ = value_iteration(mdp)
    assert check_assumption1(mdp, pi, pi).all()


def test_assumption_holds_with_constant_max_reward():
    rng = np.random.default_rng(4)
    base = random_mdp(rng, 5, 3, 6)
    mdp = TabularMDP(base.transition, np.full((5, 3), 0.7), 6, base.init_dist)
    pi_star = TabularPolicy.uniform(5, 3)
    pi_hat = TabularPolicy(rng.dirichlet(np.ones(3), size=5))
    assert check_assumption1(mdp, pi_star, pi_hat).all()


def test_assumption_matches_brute_force():
    rng = np.random.default_rng(5)
    seen = set()
    for _ in range(30):
        mdp, pi_star, pi_hat = perturbed(rng, 6, 3, 5)
        d_star = state_distributions(mdp, pi_star).dist
        d_hat = state_distributions(mdp, pi_hat).dist
        occ = d_star.mean(axis=0)
        expected = []
        for k in range(mdp.horizon):
            total = 0.0
            for s in range(mdp.n_states):
                if occ[s] <= 1e-12:
                    continue
                r_hat = sum(pi_hat.at(k)[s, a] * mdp.reward[s, a] for a in range(mdp.n_actions))
                total += (d_star[k, s] - d_hat[k, s]) * (mdp.r_max - r_hat)
            expected.append(total >= -1e-10)
        got = check_assumption1(mdp, pi_star, pi_hat)
        assert got.tolist() == expected
        seen.update(expected)
    assert seen == {True, False}


# -- closed-form bounds -------------------------------------------------------------


def test_theorem1_values():
    assert theorem1_bound(0.0, 7, 3.0) == 0.0
    assert theorem1_bound(0.01, 1000, 1.0) == pytest.approx(10000.0)
    assert theorem1_bound(2.0, 10, 0.5) == pytest.approx(100.0)
    with pytest.raises(DomainError):
        theorem1_bound(-0.1, 10, 1.0)


def test_theorem3_values():
    assert theorem3_bound(0.0, 0.9, 100, 2.0) == 0.0
    assert theorem3_bound(0.01, 0.5, 1000, 1.0) == pytest.approx(5030.0)
    assert theorem3_bound(0.1, 0.2, 1000, 1.0) == pytest.approx(20300.0)
    with pytest.raises(DomainError):
        theorem3_bound(0.1, -0.2, 10, 1.0)


def test_theorem3_tighter_below_threshold():
    T = 1000
    eps = 0.01
    assert theorem3_bound(eps, 0.5, T, 1.0) < theorem1_bound(eps, T, 1.0)
    threshold = (T - 3) / T
    assert theorem3_bound(eps, threshold, T, 1.0) == pytest.approx(theorem1_bound(eps, T, 1.0))
    assert theorem3_bound(eps, threshold + 1e-3, T, 1.0) > theorem1_bound(eps, T, 1.0)


def test_corollary_formula_and_monotonicity():
    for m in (1, 10, 1000):
        expected = 3 * math.sqrt(math.log(4) / (2 * m))
        assert corollary1_bound(0.0, 0.0, 1, 1.0, m, 1, 0.5) == pytest.approx(expected)
    args = dict(eps_hat=0.05, eps_mu=0.3, T=20, r_max=1.0, delta=0.05)
    assert corollary1_bound(m=100, pi_class_size=8, **args) < corollary1_bound(
        m=100, pi_class_size=16, **args
    )
    limit = theorem3_bound(0.05, 0.3, 20, 1.0)
    values = [corollary1_bound(m=10**k, pi_class_size=8, **args) for k in range(2, 9)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v > limit for v in values)
    assert values[-1] - limit < 1e-2 * limit
    with pytest.raises(DomainError):
        corollary1_bound(0.1, 0.1, 5, 1.0, 0, 2, 0.1)
    with pytest.raises(DomainError):
        corollary1_bound(0.1, 0.1, 5, 1.0, 10, 2, 1.0)


# -- proof quantities and fuzzing ------------------------------------------------------


def test_gap_starts_at_zero_and_obeys_recursion():
    rng = np.random.default_rng(7)
    for _ in range(20):
        mdp, pi_star, pi_hat = perturbed(rng, 7, 3, 8)
        gap = distribution_gap(mdp, pi_star, pi_hat)
        _, eps_t = pivotal_error(mdp, pi_star, pi_hat)
        assert gap[0] == 0.0
        assert np.all(gap[1:] <= gap[:-1] + eps_t[:-1] + 1e-12)


def test_hand_instance_with_maximal_pivotal_error():
    mdp = two_action_chain(5, 4)
    pi_star = TabularPolicy.deterministic(np.zeros(5, int), 2)
    pi_hat = TabularPolicy.deterministic(np.ones(5, int), 2)
    rep = error_report(mdp, pi_star, pi_hat)
    assert rep.eps == 2.0
    assert exact_return(mdp, pi_star) == 4.0 and exact_return(mdp, pi_hat) == 0.0
    assert rep.delta_J == 4.0 <= 32 * mdp.r_max == rep.thm1_bound


def test_identity_injection_is_within_both_bounds():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, 6, 3, 5, branching=2)
    pi_star, _ = value_iteration(mdp)
    row, rep = check_instance(mdp, pi_star, pi_star)
    assert rep.delta_J == 0.0 and row.violated == ""
    assert row.thm3_applicable


def test_fuzz_has_no_violations():
    report = verify_bounds(seed=0, n_trials=300)
    assert report.n_trials == 300
    assert report.ok, report.counterexamples[:1]
    assert report.n_thm3_applicable > 50
    # the generator produces both small and large pivotal errors
    eps = np.array([r.eps for r in report.rows])
    assert (eps == 0).any() and (eps > 0.5).any()


def test_fuzz_is_reproducible():
    a = verify_bounds(seed=4, n_trials=50)
    b = verify_bounds(seed=4, n_trials=50)
    assert [r.delta_J for r in a.rows] == [r.delta_J for r in b.rows]


def test_fuzz_rejects_large_caps():
    with pytest.raises(DomainError):
        verify_bounds(0, 1, max_states=9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), S=st.integers(2, 8), A=st.integers(1, 4), T=st.integers(1, 10))
def test_error_ranges_and_theorem1(seed, S, A, T):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, T, branching=int(rng.integers(1, S + 1)))
    pi_star = TabularPolicy(rng.dirichlet(np.ones(A), size=(T, S)))
    pi_hat = TabularPolicy(rng.dirichlet(np.ones(A), size=(T, S)))
    rep = error_report(mdp, pi_star, pi_hat)
    assert np.all((rep.eps_t >= 0) & (rep.eps_t <= 2 + 1e-12))
    assert np.all((rep.eps_mu_t >= 0) & (rep.eps_mu_t <= 1))
    assert rep.eps == pytest.approx(rep.eps_t.mean(), abs=1e-12)
    # Theorem 1 needs no assumption and no optimality of pi*
    assert rep.delta_J <= rep.thm1_bound + 1e-9


# -- bound sweep --------------------------------------------------------------------


def test_figure4_endpoints_and_crossover():
    mu = np.round(np.arange(0, 0.5 + 1e-9, 1e-3), 10)
    curves = figure4_sweep(mu, T=1000, r_max=1.0)
    assert curves["piv"][0] == pytest.approx(5030.0)
    assert curves["surr"][0] == pytest.approx(20300.0)
    idx = crossovers(curves["piv"], curves["surr"])
    assert len(idx) == 1
    # the difference of the two quadratics is linear in mu: -15.27 + 210 mu
    root = 15.27 / 210
    assert mu[idx[0] - 1] < root < mu[idx[0]]
    assert curves["piv"][-1] > curves["surr"][-1]
    for name in ("piv", "surr"):
        assert np.all(np.diff(curves[name]) >= 0)


def test_figure4_rejects_negative_grid():
    with pytest.raises(DomainError):
        figure4_sweep([-0.1, 0.0])
