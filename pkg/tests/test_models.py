import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popql.models import (
    DiscretePolicy,
    FiniteMDP,
    FiniteMRP,
    ModelError,
    NonErgodicError,
    SampleDistribution,
    Transition,
    build_frozen_lake,
    build_three_state,
    exact_q,
    exact_value,
    greedy_policy,
    induced_chain,
    load_model,
    mdp_to_mrp,
    model_from_dict,
    model_to_dict,
    occupancy,
    random_mdp,
    random_policy,
    save_model,
    stationary_distribution,
    three_state_mu,
    value_iteration,
)


def power_stationary(P, iters=200_000, tol=1e-14):
    nu = np.full(P.shape[0], 1.0 / P.shape[0])
    lazy = 0.5 * (P + np.eye(P.shape[0]))
    for _ in range(iters):
        nxt = nu @ lazy
        if np.abs(nxt - nu).sum() < tol:
            break
        nu = nxt
    return nxt


def policy_evaluation(mdp, policy, tol=1e-13):
    Q = np.zeros(mdp.n_pairs)
    Pf = mdp.P.reshape(mdp.n_pairs, mdp.n)
    R = mdp.R.reshape(-1)
    while True:
        V = np.sum(policy.pi * Q.reshape(mdp.n, mdp.m), axis=1)
        nxt = R + mdp.gamma * Pf @ V
        if np.max(np.abs(nxt - Q)) < tol:
            return nxt
        Q = nxt


# --- three-state instance


def test_three_state_constants():
    mrp, fmap = build_three_state()
    assert mrp.gamma == 0.99
    np.testing.assert_allclose(exact_value(mrp), [1.0, 1.0, 1.05], atol=1e-12)
    np.testing.assert_allclose(mrp.R, [-0.01475, -0.01475, 0.03525], atol=1e-12)
    for row in mrp.P:
        np.testing.assert_allclose(row, [0.25, 0.25, 0.5])
    assert fmap.Phi.shape == (3, 2)


def test_three_state_stationary():
    mrp, _ = build_three_state()
    nu = stationary_distribution(mrp.P).weights
    np.testing.assert_allclose(nu, [0.25, 0.25, 0.5], atol=1e-12)
    np.testing.assert_allclose(nu, power_stationary(mrp.P), atol=1e-8)


def test_three_state_family():
    np.testing.assert_allclose(three_state_mu(0.5), [0.25, 0.25, 0.5])
    np.testing.assert_allclose(three_state_mu(0.8), [0.4, 0.4, 0.2])
    with pytest.raises(ValueError):
        three_state_mu(1.2)


# --- validation


def test_rejects_bad_rows_and_gamma():
    with pytest.raises(ModelError):
        FiniteMRP(np.array([[0.5, 0.4], [0.0, 1.0]]), np.zeros(2), 0.9)
    with pytest.raises(ModelError):
        FiniteMRP(np.eye(2), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        build_frozen_lake(gamma=1.0)
    with pytest.raises(ModelError):
        DiscretePolicy(np.array([[0.7, 0.7]]))


def test_sample_distribution_dataset_consistency():
    recs = [Transition(0, 0, 0.0, 1, count=3), Transition(1, 1, 1.0, 0, count=1)]
    d = SampleDistribution.from_dataset(recs, 4, m=2)
    np.testing.assert_allclose(d.weights, [0.75, 0, 0, 0.25])
    with pytest.raises(ModelError):
        SampleDistribution(np.array([0.5, 0.0, 0.0, 0.5]), recs, 2)
    with pytest.raises(ModelError):
        SampleDistribution(np.array([0.5, 0.6]))


# --- exact solvers


def test_geometric_series():
    r0 = 0.7
    mrp = FiniteMRP(np.eye(3), np.full(3, r0), 0.5)
    np.testing.assert_allclose(exact_value(mrp), 2 * r0, atol=1e-12)


def test_value_matches_iteration_on_random_mrp():
    mdp = random_mdp(11, 8, 1)
    mrp = FiniteMRP(mdp.P[:, 0, :], mdp.R[:, 0], 0.9)
    V = np.zeros(8)
    for _ in range(5000):
        V = mrp.R + mrp.gamma * mrp.P @ V
    np.testing.assert_allclose(exact_value(mrp), V, atol=1e-10)


def test_myopic_q_is_reward():
    mdp = random_mdp(3, 4, 3, gamma=0.0)
    pol = random_policy(4, 4, 3)
    np.testing.assert_allclose(exact_q(mdp, pol), mdp.R.reshape(-1), atol=1e-15)


def test_frozen_lake_uniform_q_matches_iterative_evaluation():
    mdp = build_frozen_lake()
    pol = DiscretePolicy.uniform(16, 4)
    np.testing.assert_allclose(exact_q(mdp, pol), policy_evaluation(mdp, pol), atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
def test_reduction_consistency(seed, n, m):
    mdp = random_mdp(seed, n, m, sparsity=0.6)
    pol = random_policy(seed + 1, n, m)
    chain = mdp_to_mrp(mdp, pol)
    np.testing.assert_allclose(chain.P.sum(axis=1), 1.0, atol=1e-12)
    Q = exact_q(mdp, pol)
    np.testing.assert_allclose(exact_value(chain), Q, atol=1e-9)
    resid = Q - chain.R - chain.gamma * chain.P @ Q
    assert np.max(np.abs(resid)) <= 1e-9


def test_deterministic_policy_support():
    mdp = random_mdp(5, 5, 3)
    pol = DiscretePolicy.deterministic([0, 2, 1, 1, 0], 3)
    K = mdp_to_mrp(mdp, pol).P
    for row in K:
        assert np.count_nonzero(row) <= mdp.n


def test_mrp_lift_roundtrip():
    mrp, _ = build_three_state()
    mdp = mrp.as_mdp()
    chain = induced_chain(mdp, DiscretePolicy.uniform(3, 1))
    np.testing.assert_allclose(chain.P, mrp.P, atol=1e-15)
    np.testing.assert_allclose(chain.R, mrp.R)


# --- stationary distributions


def test_doubly_stochastic_uniform():
    P = np.array([[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]])
    np.testing.assert_allclose(stationary_distribution(P).weights, 1 / 3, atol=1e-12)


def test_periodic_flip():
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(stationary_distribution(P).weights, [0.5, 0.5], atol=1e-12)


def test_non_ergodic_rejected():
    P = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.25, 0.25]])
    with pytest.raises(NonErgodicError):
        stationary_distribution(P)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_stationary_fixed_point(seed, n):
    P = random_mdp(seed, n, 1, sparsity=0.5).P[:, 0, :]
    try:
        nu = stationary_distribution(P).weights
    except NonErgodicError:
        return
    assert np.abs(nu @ P - nu).sum() <= 1e-10
    np.testing.assert_allclose(nu, power_stationary(P), atol=1e-8)


# --- Frozen Lake


def test_frozen_lake_shape_and_moves():
    mdp = build_frozen_lake()
    assert mdp.n_pairs == 64
    assert mdp.P[4, 2, 5] == 1.0
    # hole at 5 resets to start regardless of action
    assert mdp.P[5, 0, 0] == 1.0 and mdp.layout[1][1] == "H"
    # off-grid stays in place
    assert mdp.P[0, 0, 0] == 1.0 and mdp.P[0, 3, 0] == 1.0
    # goal pays and resets
    assert mdp.R[15].tolist() == [1.0] * 4 and np.all(mdp.P[15, :, 0] == 1.0)


def test_frozen_lake_interior_right_move():
    mdp = build_frozen_lake()
    assert mdp.layout[2][1] == "F"
    assert mdp.P[9, 2, 10] == 1.0


def test_frozen_lake_slip():
    mdp = build_frozen_lake(slip=True)
    # right from 9 slips to 10, 5 (up) or 13 (down)
    np.testing.assert_allclose(mdp.P[9, 2, [10, 5, 13]], 1 / 3)


def test_frozen_lake_uniform_occupancy_power_iteration():
    mdp = build_frozen_lake()
    pol = DiscretePolicy.uniform(16, 4)
    d = occupancy(mdp, pol).weights
    ref = power_stationary(mdp_to_mrp(mdp, pol).P)
    np.testing.assert_allclose(d, ref, atol=1e-8)
    assert d.reshape(16, 4).sum(axis=1)[0] > 0


def test_value_iteration_greedy():
    mdp = build_frozen_lake()
    Q = value_iteration(mdp)
    opt = greedy_policy(Q)
    np.testing.assert_allclose(exact_q(mdp, opt).reshape(16, 4), Q, atol=1e-8)


# --- random generator


def test_random_mdp_deterministic_and_dense():
    a, b = random_mdp(9, 5, 2), random_mdp(9, 5, 2)
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.R, b.R)
    assert np.all(a.P > 0)
    assert np.all(np.isfinite(exact_q(a, random_policy(0, 5, 2))))


# --- JSON


def test_json_roundtrip(tmp_path):
    mdp = build_frozen_lake()
    path = tmp_path / "lake.json"
    save_model(mdp, path)
    doc = json.loads(path.read_text())
    assert {"n", "m", "gamma", "P", "R", "start", "layout"} <= set(doc)
    back = load_model(path)
    np.testing.assert_array_equal(back.P, mdp.P)
    assert back.layout == mdp.layout
    mrp, _ = build_three_state()
    back = model_from_dict(model_to_dict(mrp))
    assert isinstance(back, FiniteMRP)
    np.testing.assert_array_equal(back.R, mrp.R)


def test_loader_validates():
    doc = model_to_dict(build_frozen_lake())
    doc["P"][0][0][0] = 0.5
    with pytest.raises(ModelError):
        model_from_dict(doc)
